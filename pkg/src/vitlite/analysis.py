"""Layer analysis: CKA, attention similarity, attention statistics, Fourier spectra.

All routines work on plain float64 numpy arrays.  Attention inputs are the
pre-softmax logits stored in :class:`~vitlite.vit.ActivationTrace`, laid out
``(..., heads, query, key)``; the softmax is taken over the key axis here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, ContractError
from .tensor import Tensor, dft2
from .vit import ActivationTrace


class DegenerateInputError(ContractError):
    """A representation has no variance across examples."""


def _np(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


# ---------------------------------------------------------------- HSIC / CKA


def gram_linear(x) -> np.ndarray:
    """Linear-kernel Gram matrix of per-example rows (features are flattened)."""
    x = _np(x)
    x = x.reshape(len(x), -1)
    return x @ x.T


def hsic_unbiased(K: np.ndarray, L: np.ndarray) -> float:
    """Unbiased HSIC estimator on Gram matrices with the diagonal removed.

    Raises:
        ContractError: for fewer than four examples or mismatched shapes.
    """
    K, L = _np(K), _np(L)
    n = K.shape[0]
    if K.shape != (n, n) or L.shape != (n, n):
        raise ContractError(f"Gram matrices must be square and equal, got {K.shape}, {L.shape}")
    if n < 4:
        raise ContractError("unbiased HSIC needs at least 4 examples")
    K = K.copy()
    L = L.copy()
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(L, 0.0)
    ones_k = K.sum(axis=0)
    ones_l = L.sum(axis=0)
    term1 = np.sum(K * L)
    term2 = ones_k.sum() * ones_l.sum() / ((n - 1) * (n - 2))
    term3 = 2.0 * (ones_k @ ones_l) / (n - 2)
    return float((term1 + term2 - term3) / (n * (n - 3)))


def _check_variance(x: np.ndarray, name: str) -> None:
    flat = x.reshape(len(x), -1)
    if not np.any(np.abs(flat - flat[0]) > 0):
        raise DegenerateInputError(f"{name} has zero variance across examples")


def cka(x, y) -> float:
    """Linear CKA of two representations of the same ``n`` examples.

    Each example's representation is flattened (tokens x channels) to a row.

    Raises:
        DegenerateInputError: if either input is constant across examples.
    """
    x, y = _np(x), _np(y)
    if len(x) != len(y):
        raise ContractError(f"example counts differ: {len(x)} vs {len(y)}")
    _check_variance(x, "x")
    _check_variance(y, "y")
    K, L = gram_linear(x), gram_linear(y)
    kk, ll = hsic_unbiased(K, K), hsic_unbiased(L, L)
    if kk <= 0 or ll <= 0:
        raise DegenerateInputError("self-HSIC is not positive; representation too degenerate")
    return hsic_unbiased(K, L) / math.sqrt(kk * ll)


@dataclass
class GramAccumulator:
    """Minibatch CKA between every layer of two models.

    Per-batch unbiased HSIC values are stored and summed with
    :func:`math.fsum`, so the result does not depend on batch order.
    """

    n_a: int
    n_b: int
    cross: list[np.ndarray] = field(default_factory=list)
    self_a: list[np.ndarray] = field(default_factory=list)
    self_b: list[np.ndarray] = field(default_factory=list)

    @property
    def batches(self) -> int:
        return len(self.cross)

    def update(self, reps_a, reps_b) -> None:
        if len(reps_a) != self.n_a or len(reps_b) != self.n_b:
            raise ContractError("layer counts do not match the accumulator")
        n = len(_np(reps_a[0]))
        if any(len(_np(r)) != n for r in list(reps_a) + list(reps_b)):
            raise ContractError("all representations in a batch need the same example count")
        ga = [gram_linear(r) for r in reps_a]
        gb = [gram_linear(r) for r in reps_b]
        self.self_a.append(np.array([hsic_unbiased(k, k) for k in ga]))
        self.self_b.append(np.array([hsic_unbiased(g, g) for g in gb]))
        self.cross.append(np.array([[hsic_unbiased(k, g) for g in gb] for k in ga]))

    def result(self) -> np.ndarray:
        if not self.cross:
            raise ContractError("no batches accumulated")
        cross = np.stack(self.cross)
        sa, sb = np.stack(self.self_a), np.stack(self.self_b)
        num = np.array([[math.fsum(cross[:, i, j]) for j in range(self.n_b)] for i in range(self.n_a)])
        da = np.array([math.fsum(sa[:, i]) for i in range(self.n_a)])
        db = np.array([math.fsum(sb[:, j]) for j in range(self.n_b)])
        if np.any(da <= 0) or np.any(db <= 0):
            raise DegenerateInputError("self-HSIC is not positive for some layer")
        return num / np.sqrt(np.outer(da, db))


def cka_minibatch(x, y, batch_size: int) -> float:
    """CKA from HSIC values averaged over consecutive minibatches."""
    x, y = _np(x), _np(y)
    acc = GramAccumulator(1, 1)
    for s in range(0, len(x), batch_size):
        acc.update([x[s:s + batch_size]], [y[s:s + batch_size]])
    return float(acc.result()[0, 0])


# ---------------------------------------------------------------- attention similarity


def _log_softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def attn_cross_entropy(a, b) -> np.ndarray:
    """Per-query cross-entropy ``-sum_k softmax(a) log softmax(b)``."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ContractError(f"attention shapes differ: {a.shape} vs {b.shape}")
    return -(np.exp(_log_softmax(a)) * _log_softmax(b)).sum(axis=-1)


def attn_head_similarity(a, b, symmetric: bool = False) -> float:
    """``-(1/l) sum_j CE(b, a)_j``, averaged over any leading example axes.

    Note the argument order inside the cross-entropy: ``b`` supplies the
    weights and ``a`` the log-probabilities.  ``symmetric`` averages both
    orders instead.
    """
    s = -attn_cross_entropy(b, a).mean()
    if symmetric:
        s = 0.5 * (s - attn_cross_entropy(a, b).mean())
    return float(s)


def head_similarity_matrix(a, b, symmetric: bool = False) -> np.ndarray:
    """``S[h, g]`` = similarity of head ``h`` of ``a`` to head ``g`` of ``b``.

    Inputs are ``(H, l, l)`` or ``(n, H, l, l)``; example axes are averaged.
    """
    a, b = _np(a), _np(b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractError(f"attention shapes differ: {a.shape} vs {b.shape}")
    la, lb = _log_softmax(a), _log_softmax(b)
    n, _, l, _ = a.shape
    s = np.einsum("ngqk,nhqk->hg", np.exp(lb), la) / (n * l)
    if symmetric:
        s = 0.5 * (s + np.einsum("nhqk,ngqk->hg", np.exp(la), lb) / (n * l))
    return s


def match_heads_hungarian(a, b, symmetric: bool = False) -> np.ndarray:
    """Permutation ``sigma`` maximising ``sum_h S(a_h, b_sigma(h))``.

    Raises:
        ContractError: if the two blocks have different head counts.
    """
    a, b = _np(a), _np(b)
    if a.shape[-3] != b.shape[-3]:
        raise ContractError(f"head counts differ: {a.shape[-3]} vs {b.shape[-3]}")
    s = head_similarity_matrix(a, b, symmetric)
    rows, cols = linear_sum_assignment(s, maximize=True)
    sigma = np.empty(len(rows), dtype=np.int64)
    sigma[rows] = cols
    return sigma


def attn_similarity(a, b, symmetric: bool = False) -> float:
    """Mean matched-head similarity of two attention blocks."""
    a, b = _np(a), _np(b)
    if a.shape[-3] != b.shape[-3]:
        raise ContractError(f"head counts differ: {a.shape[-3]} vs {b.shape[-3]}")
    s = head_similarity_matrix(a, b, symmetric)
    rows, cols = linear_sum_assignment(s, maximize=True)
    return float(s[rows, cols].mean())


# ---------------------------------------------------------------- heatmaps


@dataclass
class SimilarityHeatmap:
    matrix: np.ndarray
    rows: list[int]
    cols: list[int]
    kind: str

    def diagonal(self) -> np.ndarray:
        """Similarity of corresponding layers (shared indices only)."""
        n = min(len(self.rows), len(self.cols))
        return np.array([self.matrix[i, i] for i in range(n)])

    @property
    def T(self) -> "SimilarityHeatmap":
        return SimilarityHeatmap(self.matrix.T.copy(), self.cols, self.rows, self.kind)


def flatten_reps(trace: ActivationTrace) -> list[np.ndarray]:
    return [_np(r).reshape(len(_np(r)), -1) for r in trace.representations]


def heatmap(trace_a: ActivationTrace, trace_b: ActivationTrace, kind: str = "representation",
            symmetric: bool = False) -> SimilarityHeatmap:
    """Layer-by-layer similarity of two traces taken on the same inputs.

    ``representation`` uses CKA over layers ``0..L``; ``attention`` uses the
    matched-head similarity over blocks ``1..L``.
    """
    if kind in ("rep", "representation"):
        ra, rb = flatten_reps(trace_a), flatten_reps(trace_b)
        if len(ra[0]) != len(rb[0]):
            raise ContractError(f"example counts differ: {len(ra[0])} vs {len(rb[0])}")
        acc = GramAccumulator(len(ra), len(rb))
        acc.update(ra, rb)
        return SimilarityHeatmap(acc.result(), list(range(len(ra))), list(range(len(rb))),
                                 "representation")
    if kind in ("attn", "attention"):
        aa = [_np(r.logits) for r in trace_a.attentions]
        ab = [_np(r.logits) for r in trace_b.attentions]
        if aa[0].shape[0] != ab[0].shape[0]:
            raise ContractError("example counts differ between traces")
        m = np.array([[attn_similarity(x, y, symmetric) for y in ab] for x in aa])
        return SimilarityHeatmap(m, list(range(1, len(aa) + 1)), list(range(1, len(ab) + 1)),
                                 "attention")
    raise ConfigError([("kind", f"unknown heatmap kind {kind!r}")])


class HeatmapBuilder:
    """Stream batches of paired traces into one heatmap.

    Representation heatmaps use minibatch CKA; attention heatmaps average
    the per-head similarity matrices over batches before matching heads.
    """

    def __init__(self, kind: str = "representation", symmetric: bool = False):
        self.kind = "representation" if kind in ("rep", "representation") else kind
        if self.kind not in ("representation", "attention"):
            raise ConfigError([("kind", f"unknown heatmap kind {kind!r}")])
        self.symmetric = symmetric
        self._acc: GramAccumulator | None = None
        self._sums: np.ndarray | None = None
        self._count = 0

    def update(self, trace_a: ActivationTrace, trace_b: ActivationTrace) -> None:
        if self.kind == "representation":
            ra, rb = flatten_reps(trace_a), flatten_reps(trace_b)
            if self._acc is None:
                self._acc = GramAccumulator(len(ra), len(rb))
            self._acc.update(ra, rb)
            return
        aa = [_np(r.logits) for r in trace_a.attentions]
        ab = [_np(r.logits) for r in trace_b.attentions]
        for x, y in ((x, y) for x in aa for y in ab):
            if x.shape[1] != y.shape[1]:
                raise ContractError("attention similarity needs equal head counts")
        n = aa[0].shape[0]
        mats = np.array([[head_similarity_matrix(x, y, self.symmetric) * n for y in ab] for x in aa])
        self._sums = mats if self._sums is None else self._sums + mats
        self._count += n

    def result(self) -> SimilarityHeatmap:
        if self.kind == "representation":
            if self._acc is None:
                raise ContractError("no batches accumulated")
            m = self._acc.result()
            return SimilarityHeatmap(m, list(range(m.shape[0])), list(range(m.shape[1])), self.kind)
        if self._sums is None:
            raise ContractError("no batches accumulated")
        mean = self._sums / self._count
        la, lb = mean.shape[:2]
        m = np.zeros((la, lb))
        for i in range(la):
            for j in range(lb):
                r, c = linear_sum_assignment(mean[i, j], maximize=True)
                m[i, j] = mean[i, j][r, c].mean()
        return SimilarityHeatmap(m, list(range(1, la + 1)), list(range(1, lb + 1)), self.kind)


# ---------------------------------------------------------------- attention statistics


@dataclass
class AttnStats:
    """Per-layer mean / std of attention entropy and distance over tokens and heads."""

    entropy_mean: np.ndarray
    entropy_std: np.ndarray
    distance_mean: np.ndarray
    distance_std: np.ndarray


def grid_distances(grid: int) -> np.ndarray:
    """Euclidean distance between patch positions on a ``grid x grid`` lattice."""
    yy, xx = np.divmod(np.arange(grid * grid), grid)
    return np.hypot(yy[:, None] - yy[None, :], xx[:, None] - xx[None, :])


def _patch_probs(a, num_prefix: int) -> np.ndarray:
    a = _np(a)
    if num_prefix:
        a = a[..., num_prefix:, num_prefix:]
    return np.exp(_log_softmax(a))


def _entropy_values(p: np.ndarray) -> np.ndarray:
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def attention_entropy(a, num_prefix: int = 0) -> tuple[float, float]:
    """Mean and std of per-query attention entropy across tokens, heads, examples."""
    e = _entropy_values(_patch_probs(a, num_prefix))
    return float(e.mean()), float(e.std())


def attention_distance(a, grid: int | None = None, num_prefix: int = 0) -> tuple[float, float]:
    """Mean and std of the attention-weighted spatial distance per query.

    Raises:
        ConfigError: if the patch count is not a square and no grid is given.
    """
    p = _patch_probs(a, num_prefix)
    l = p.shape[-1]
    if grid is None:
        grid = int(round(math.sqrt(l)))
        if grid * grid != l:
            raise ConfigError([("grid", f"{l} patch tokens do not form a square grid")])
    if grid * grid != l:
        raise ConfigError([("grid", f"grid {grid} does not hold {l} tokens")])
    d = (p * grid_distances(grid)).sum(axis=-1)
    return float(d.mean()), float(d.std())


def attention_stats(trace: ActivationTrace, grid: int | None = None) -> AttnStats:
    ent = [attention_entropy(r.logits, trace.num_prefix) for r in trace.attentions]
    dist = [attention_distance(r.logits, grid, trace.num_prefix) for r in trace.attentions]
    return AttnStats(np.array([e[0] for e in ent]), np.array([e[1] for e in ent]),
                     np.array([d[0] for d in dist]), np.array([d[1] for d in dist]))


# ---------------------------------------------------------------- Fourier


@dataclass
class SpectrumProfile:
    """Per-layer ``log A(1.0 pi) - log A(0.0 pi)`` and the half-diagonal log spectra."""

    delta: np.ndarray
    log_amplitude: list[np.ndarray]
    frequencies: np.ndarray


def half_diagonal_log_amplitude(maps, amp_floor: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Log of the channel/example-averaged centred amplitude along the half-diagonal.

    Args:
        maps: ``(n, g, g, channels)`` feature maps.

    Returns:
        ``(log_amp, freq)`` from the zero frequency outward, ``freq`` in units of pi.
    """
    maps = _np(maps)
    n, g, g2, c = maps.shape
    if g != g2:
        raise ConfigError([("grid", f"feature maps must be square, got {g}x{g2}")])
    amp = dft2(maps.transpose(0, 3, 1, 2)).mean(axis=(0, 1))
    centre = g // 2
    idx = np.arange(centre, -1, -1)
    diag = amp[idx, idx]
    freq = (centre - idx) / (g / 2.0)
    return np.log(np.maximum(diag, amp_floor)), freq


def delta_log_amplitude(maps, amp_floor: float = 1e-12, delta_floor: float | None = None) -> float:
    """High-minus-low log amplitude, clamped from below at ``delta_floor``.

    ``delta_floor`` defaults to ``log(amp_floor)``; spatially constant maps,
    whose high-frequency amplitude vanishes, report exactly that value.
    """
    log_amp, _ = half_diagonal_log_amplitude(maps, amp_floor)
    floor = math.log(amp_floor) if delta_floor is None else delta_floor
    return float(max(log_amp[-1] - log_amp[0], floor))


def token_maps(rep, num_prefix: int = 0) -> np.ndarray:
    """``(n, l, d)`` tokens to ``(n, g, g, d)`` maps (prefix tokens removed)."""
    r = _np(rep)[:, num_prefix:]
    n, l, d = r.shape
    g = int(round(math.sqrt(l)))
    if g * g != l:
        raise ConfigError([("grid", f"{l} tokens do not form a square grid")])
    return r.reshape(n, g, g, d)


def fourier_delta_log_amp(trace: ActivationTrace, amp_floor: float = 1e-12,
                          delta_floor: float | None = None) -> SpectrumProfile:
    deltas, logs, freq = [], [], None
    for rep in trace.representations:
        maps = token_maps(rep, trace.num_prefix)
        log_amp, freq = half_diagonal_log_amplitude(maps, amp_floor)
        logs.append(log_amp)
        deltas.append(delta_log_amplitude(maps, amp_floor, delta_floor))
    return SpectrumProfile(np.array(deltas), logs, freq)


# ---------------------------------------------------------------- export


def write_heatmap_csv(path: str | Path, hm: SimilarityHeatmap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + [str(c) for c in hm.cols])
        for r, row in zip(hm.rows, hm.matrix):
            w.writerow([str(r)] + [repr(float(v)) for v in row])


def read_heatmap_csv(path: str | Path) -> SimilarityHeatmap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = [int(c) for c in rows[0][1:]]
    labels = [int(r[0]) for r in rows[1:]]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return SimilarityHeatmap(mat, labels, cols, "unknown")


def write_pgm(path: str | Path, matrix: np.ndarray, vmin: float | None = None,
              vmax: float | None = None, cell: int = 8) -> None:
    """Binary 8-bit greyscale image, one ``cell x cell`` block per matrix entry."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = np.nanmin(m) if vmin is None else vmin
    hi = np.nanmax(m) if vmax is None else vmax
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    pix = np.clip(np.round(np.nan_to_num(scaled) * 255), 0, 255).astype(np.uint8)
    pix = np.kron(pix, np.ones((cell, cell), dtype=np.uint8))
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_profile_csv(path: str | Path, profile: SpectrumProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "delta_log_amplitude"])
        for i, d in enumerate(profile.delta):
            w.writerow([i, repr(float(d))])


def write_attn_stats_csv(path: str | Path, stats: AttnStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "entropy_mean", "entropy_std", "distance_mean", "distance_std"])
        for i in range(len(stats.entropy_mean)):
            w.writerow([i + 1, repr(float(stats.entropy_mean[i])), repr(float(stats.entropy_std[i])),
                        repr(float(stats.distance_mean[i])), repr(float(stats.distance_std[i]))])
