import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from vitlite import analysis as A
from vitlite.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from vitlite.mae import generate_mask, keep_count
from vitlite.train import layerwise_multipliers

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(6, 30), st.integers(1, 6), st.floats(0.1, 50))
def test_cka_orthogonal_and_scale_invariant(seed, n, d, scale):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, d + 1))
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    assert abs(A.cka(x, y) - A.cka(scale * x @ q, y)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 5), st.integers(2, 8))
def test_matching_never_worse_than_identity(seed, heads, length):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, heads, length, length))
    b = rng.standard_normal((2, heads, length, length))
    sim = A.head_similarity_matrix(a, b)
    sigma = A.match_heads_hungarian(a, b)
    assert sorted(sigma.tolist()) == list(range(heads))
    matched = sum(sim[h, sigma[h]] for h in range(heads))
    assert matched >= np.trace(sim) - 1e-12


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 100), st.floats(0.0, 0.95))
def test_mask_plans_partition_tokens(seed, length, ratio):
    assume(keep_count(length, ratio) >= 1)
    plan = generate_mask(3, length, ratio, np.random.default_rng(seed))
    k = keep_count(length, ratio)
    assert plan.len_keep == k and plan.mask.sum() == 3 * (length - k)
    for row, keep in zip(plan.mask, plan.ids_keep):
        assert not row[keep].any()


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abcdefg.", min_size=1, max_size=8),
                       arrays(st.sampled_from([np.float32, np.float64, np.int64, np.int8]),
                              array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
                       max_size=4))
def test_checkpoint_round_trip_any_arrays(tensors):
    back = decode_checkpoint(encode_checkpoint(Checkpoint("pretrain", tensors)))
    assert list(back.tensors) == list(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape and back.tensors[k].tobytes() == v.tobytes()


@given(st.floats(0.01, 1.0), st.integers(1, 24))
def test_layer_multipliers_geometric(decay, depth):
    m = layerwise_multipliers(decay, depth)
    assert m[-1] == 1.0 and len(m) == depth + 2
    assert all(a <= b for a, b in zip(m, m[1:]))
