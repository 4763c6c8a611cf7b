import itertools
import math

import numpy as np
import pytest

from vitlite import analysis as A
from vitlite.errors import ConfigError, ContractError
from vitlite.tensor import no_grad
from vitlite.vit import ViT, ViTConfig


def hsic_u_statistic(K, L):
    """Unbiased HSIC straight from its U-statistic definition over distinct 4-tuples."""
    n = len(K)
    total = 0.0
    for i, j, q, r in itertools.permutations(range(n), 4):
        total += K[i, j] * L[i, j] + K[i, j] * L[q, r] - 2 * K[i, j] * L[i, q]
    return total / math.perm(n, 4)


def _feats(n, p, seed):
    return np.random.default_rng(seed).standard_normal((n, p))


# ---------------------------------------------------------------- HSIC / CKA


@pytest.mark.parametrize("n", [4, 5, 7])
def test_hsic_matches_u_statistic(n):
    x, y = _feats(n, 3, n), _feats(n, 2, n + 1)
    K, L = A.gram_linear(x), A.gram_linear(y)
    assert A.hsic_unbiased(K, L) == pytest.approx(hsic_u_statistic(K, L), rel=1e-10, abs=1e-12)


def test_hsic_hand_case_n4():
    # By hand with zeroed diagonals: tr(KL) = 16, (1'K1)(1'L1)/((n-1)(n-2)) = 12*(-2)/6 = -4,
    # 2 (K1).(L1)/(n-2) = 2*3/2 = 3, so HSIC = (16 - 4 - 3) / (n(n-3)) = 9/4.
    x = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, -1.0]])
    y = np.array([[2.0], [-1.0], [0.0], [1.0]])
    K, L = A.gram_linear(x), A.gram_linear(y)
    assert hsic_u_statistic(K, L) == pytest.approx(2.25, abs=1e-12)
    assert A.hsic_unbiased(K, L) == pytest.approx(2.25, abs=1e-12)


def test_hsic_needs_four_examples():
    K = A.gram_linear(_feats(3, 2, 0))
    with pytest.raises(ContractError):
        A.hsic_unbiased(K, K)


def test_hsic_self_positive():
    K = A.gram_linear(_feats(20, 5, 1))
    assert A.hsic_unbiased(K, K) > 0


def test_cka_self_is_one():
    x = _feats(50, 8, 2)
    assert A.cka(x, x) == pytest.approx(1.0, abs=1e-6)


def test_cka_orthogonal_and_scale_invariant():
    x, y = _feats(60, 6, 3), _feats(60, 4, 4) + _feats(60, 6, 3)[:, :4]
    q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((6, 6)))
    base = A.cka(x, y)
    assert A.cka(3.7 * x @ q, y) == pytest.approx(base, abs=1e-6)
    assert A.cka(x @ q, 0.01 * y) == pytest.approx(base, abs=1e-6)


def test_cka_symmetric_and_flattens_tokens():
    x = _feats(30, 12, 6).reshape(30, 3, 4)
    y = _feats(30, 5, 7)
    assert A.cka(x, y) == pytest.approx(A.cka(y, x), abs=1e-12)
    assert A.cka(x, y) == A.cka(x.reshape(30, 12), y)


def test_cka_degenerate_input():
    x = np.ones((10, 3))
    with pytest.raises(A.DegenerateInputError):
        A.cka(x, _feats(10, 3, 0))


def test_cka_minibatch_close_to_full():
    x = _feats(256, 10, 8)
    y = np.tanh(x @ np.random.default_rng(9).standard_normal((10, 7))) + 0.5 * _feats(256, 7, 10)
    full = A.cka(x, y)
    mini = A.cka_minibatch(x, y, 64)
    assert abs(mini - full) / full < 0.02


def test_cka_independent_near_zero():
    assert abs(A.cka(_feats(1000, 16, 11), _feats(1000, 16, 12))) < 0.05


def test_gram_accumulator_order_invariant():
    rng = np.random.default_rng(13)
    batches = [(rng.standard_normal((16, 5)), rng.standard_normal((16, 3))) for _ in range(5)]
    results = []
    for order in ([0, 1, 2, 3, 4], [4, 2, 0, 3, 1], [1, 0, 4, 3, 2]):
        acc = A.GramAccumulator(1, 1)
        for i in order:
            acc.update([batches[i][0]], [batches[i][1]])
        results.append(acc.result())
    assert results[0].tobytes() == results[1].tobytes() == results[2].tobytes()


def test_gram_accumulator_requires_batches():
    with pytest.raises(ContractError):
        A.GramAccumulator(1, 1).result()


# ---------------------------------------------------------------- attention similarity


def test_uniform_self_similarity_is_minus_log_l():
    for l in (2, 5, 16):
        z = np.zeros((l, l))
        assert A.attn_head_similarity(z, z) == pytest.approx(-math.log(l), abs=1e-6)


def test_attn_similarity_l2_hand_case():
    a = np.array([[0.0, math.log(3)], [0.0, 0.0]])
    b = np.array([[0.0, 0.0], [0.0, math.log(3)]])
    # softmax(a) rows: (1/4, 3/4), (1/2, 1/2); softmax(b) rows: (1/2, 1/2), (1/4, 3/4)
    # weights come from b, log-probabilities from a
    expected = 0.5 * (0.5 * math.log(1 / 4) + 0.5 * math.log(3 / 4)
                      + 0.25 * math.log(1 / 2) + 0.75 * math.log(1 / 2))
    assert A.attn_head_similarity(a, b) == pytest.approx(expected, abs=1e-12)
    ce = A.attn_cross_entropy(b, a)
    assert ce.shape == (2,)
    assert -ce.mean() == pytest.approx(expected, abs=1e-12)


def test_attn_similarity_argument_order_matters():
    a = np.array([[0.0, math.log(3)], [0.0, 0.0]])
    b = np.array([[0.0, 0.0], [0.0, math.log(3)]]) * 3
    assert A.attn_head_similarity(a, b) != pytest.approx(A.attn_head_similarity(b, a))
    sym = A.attn_head_similarity(a, b, symmetric=True)
    assert sym == pytest.approx(0.5 * (A.attn_head_similarity(a, b) + A.attn_head_similarity(b, a)))


def test_attn_shape_mismatch():
    with pytest.raises(ContractError):
        A.attn_cross_entropy(np.zeros((3, 3)), np.zeros((4, 4)))


def _cost(s, sigma):
    return math.fsum(s[h, sigma[h]] for h in range(len(sigma)))


def test_hungarian_matches_brute_force():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h = 2 + seed % 5
        a, b = rng.standard_normal((2, h, 4, 4))
        s = A.head_similarity_matrix(a, b)
        best = max(_cost(s, p) for p in itertools.permutations(range(h)))
        assert _cost(s, A.match_heads_hungarian(a, b)) == best


def test_hungarian_recovers_known_permutation():
    rng = np.random.default_rng(21)
    a = rng.standard_normal((5, 6, 6)) * 3
    pi = np.array([3, 0, 4, 1, 2])
    b = np.empty_like(a)
    b[pi] = a
    np.testing.assert_array_equal(A.match_heads_hungarian(a, b), pi)


def test_hungarian_single_head_and_unequal_heads():
    a = np.random.default_rng(0).standard_normal((1, 3, 3))
    np.testing.assert_array_equal(A.match_heads_hungarian(a, a * 2), [0])
    with pytest.raises(ContractError):
        A.match_heads_hungarian(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))


def test_attn_similarity_two_head_manual_enumeration():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 2, 3, 3)) * 2
    s = [[A.attn_head_similarity(a[h], b[g]) for g in range(2)] for h in range(2)]
    expected = max((s[0][0] + s[1][1]) / 2, (s[0][1] + s[1][0]) / 2)
    assert A.attn_similarity(a, b) == pytest.approx(expected, abs=1e-12)


def test_attn_similarity_invariant_to_joint_head_permutation():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 2, 4, 5, 5))
    perm = [2, 0, 3, 1]
    assert A.attn_similarity(a[:, perm], b[:, perm]) == pytest.approx(A.attn_similarity(a, b),
                                                                       abs=1e-12)


def test_attn_self_similarity_is_mean_head_entropy():
    a = np.random.default_rng(6).standard_normal((3, 4, 4))
    expected = np.mean([A.attn_head_similarity(a[h], a[h]) for h in range(3)])
    assert A.attn_similarity(a, a) == pytest.approx(expected, abs=1e-12)


def test_self_similarity_dominates_on_random_trials():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h = 2 + seed % 5
        a, b = rng.standard_normal((2, h, 16, 16))
        assert A.attn_similarity(a, a) >= A.attn_similarity(a, b)


def test_gibbs_bound_holds_for_weighting_argument():
    # weights come from the second argument, so S(B, B) bounds S(A, B) for every A
    rng = np.random.default_rng(0)
    for _ in range(500):
        l = int(rng.integers(2, 8))
        a = rng.standard_normal((l, l)) * 10 ** rng.uniform(-2, 2)
        b = rng.standard_normal((l, l)) * 10 ** rng.uniform(-2, 2)
        assert A.attn_head_similarity(b, b) >= A.attn_head_similarity(a, b) - 1e-12


def test_self_similarity_is_not_a_bound_in_the_first_argument():
    # a flat map compared with a peaked one scores above its own entropy
    a, b = 0.1 * np.eye(2), 10 * np.eye(2)
    assert A.attn_head_similarity(a, a) < A.attn_head_similarity(a, b)


# ---------------------------------------------------------------- entropy / distance


def test_uniform_entropy_is_log_l():
    for l in (4, 9, 16):
        mean, std = A.attention_entropy(np.zeros((2, 3, l, l)))
        assert mean == pytest.approx(math.log(l), abs=1e-6)
        assert std == pytest.approx(0.0, abs=1e-9)


def test_one_hot_self_attention():
    logits = np.broadcast_to(1e4 * np.eye(9), (2, 9, 9))
    assert A.attention_entropy(logits) == (0.0, 0.0)
    assert A.attention_distance(logits) == (0.0, 0.0)


def test_uniform_distance_2x2_brute_force():
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    per_query = [sum(0.25 * math.dist(cells[i], cells[j]) for i in range(4)) for j in range(4)]
    expected = sum(per_query) / 4
    mean, _ = A.attention_distance(np.zeros((1, 4, 4)), grid=2)
    assert mean == expected


def test_distance_bounds_and_prefix_removal():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((2, 2, 17, 17)) * 3
    mean, _ = A.attention_distance(logits, num_prefix=1)
    assert 0 <= mean <= math.sqrt(2) * 3
    ent, _ = A.attention_entropy(logits, num_prefix=1)
    assert 0 <= ent <= math.log(16)


def test_distance_non_square_grid():
    with pytest.raises(ConfigError):
        A.attention_distance(np.zeros((1, 6, 6)))
    with pytest.raises(ConfigError):
        A.attention_distance(np.zeros((1, 4, 4)), grid=3)


# ---------------------------------------------------------------- Fourier


def test_checkerboard_delta_positive():
    g = 8
    board = np.indices((g, g)).sum(0) % 2 * 2.0 - 1.0
    maps = np.broadcast_to(board[None, :, :, None], (2, g, g, 4))
    assert A.delta_log_amplitude(maps) > 0


def test_white_noise_delta_near_zero():
    maps = np.random.default_rng(8).standard_normal((8, 16, 16, 64))
    assert abs(A.delta_log_amplitude(maps)) < 0.5


def test_constant_maps_report_floor():
    maps = np.full((2, 4, 4, 3), 0.7)
    assert A.delta_log_amplitude(maps) == pytest.approx(math.log(1e-12))
    assert A.delta_log_amplitude(maps, delta_floor=-5.0) == -5.0


def test_half_diagonal_frequencies():
    _, freq = A.half_diagonal_log_amplitude(np.zeros((1, 8, 8, 1)) + 1.0)
    assert freq[0] == 0.0 and freq[-1] == 1.0


def test_token_maps_non_square():
    with pytest.raises(ConfigError):
        A.token_maps(np.zeros((1, 5, 3)))


# ---------------------------------------------------------------- heatmaps and export


@pytest.fixture(scope="module")
def two_traces():
    cfg = ViTConfig(image_size=16, patch_size=4, depth=2, dim=16, heads=2)
    images = np.random.default_rng(0).random((12, 3, 16, 16)).astype(np.float32)
    with no_grad():
        ta = ViT(cfg, 0).forward(images, trace=True)[1]
        tb = ViT(ViTConfig(**{**cfg.to_dict(), "depth": 3}), 1).forward(images, trace=True)[1]
    return ta, tb


def test_self_heatmap_diagonal(two_traces):
    ta, _ = two_traces
    hm = A.heatmap(ta, ta, "representation")
    np.testing.assert_allclose(hm.diagonal(), 1.0, atol=1e-4)
    assert hm.rows == [0, 1, 2]


def test_heatmap_shapes_and_transpose(two_traces):
    ta, tb = two_traces
    ab = A.heatmap(ta, tb, "representation")
    ba = A.heatmap(tb, ta, "representation")
    assert ab.matrix.shape == (3, 4)
    np.testing.assert_allclose(ab.matrix, ba.matrix.T, atol=1e-12)
    att = A.heatmap(ta, tb, "attention")
    assert att.matrix.shape == (2, 3) and att.rows == [1, 2] and att.cols == [1, 2, 3]


def test_heatmap_example_count_mismatch(two_traces):
    ta, _ = two_traces
    cfg = ViTConfig(image_size=16, patch_size=4, depth=2, dim=16, heads=2)
    with no_grad():
        other = ViT(cfg, 0).forward(np.zeros((5, 3, 16, 16), np.float32), trace=True)[1]
    with pytest.raises(ContractError):
        A.heatmap(ta, other, "representation")
    with pytest.raises(ContractError):
        A.heatmap(ta, other, "attention")


def test_builder_matches_single_batch_attention(two_traces):
    ta, tb = two_traces
    b = A.HeatmapBuilder("attention")
    b.update(ta, tb)
    np.testing.assert_allclose(b.result().matrix, A.heatmap(ta, tb, "attention").matrix)


def test_csv_and_pgm_round_trip(tmp_path, two_traces):
    ta, tb = two_traces
    hm = A.heatmap(ta, tb)
    A.write_heatmap_csv(tmp_path / "h.csv", hm)
    back = A.read_heatmap_csv(tmp_path / "h.csv")
    assert back.rows == hm.rows and back.cols == hm.cols
    np.testing.assert_array_equal(back.matrix, hm.matrix)
    A.write_pgm(tmp_path / "h.pgm", hm.matrix, vmin=0.0, vmax=1.0, cell=2)
    img = A.read_pgm(tmp_path / "h.pgm")
    assert img.shape == (6, 8) and img.dtype == np.uint8


def test_attention_stats_and_profile(two_traces):
    ta, _ = two_traces
    st = A.attention_stats(ta)
    assert st.entropy_mean.shape == (2,)
    assert np.all(st.entropy_mean <= math.log(16) + 1e-9) and np.all(st.distance_mean >= 0)
    prof = A.fourier_delta_log_amp(ta)
    assert prof.delta.shape == (3,) and np.all(np.isfinite(prof.delta))
