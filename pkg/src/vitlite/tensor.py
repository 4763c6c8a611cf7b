"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure computing the vector-Jacobian product.  Calling
:func:`backward` on a scalar walks the tape once in reverse topological order
and then releases it, so a graph can only be differentiated a single time.

Broadcasting is limited to a leading batch: the smaller operand's shape must
equal a suffix of the larger one (a bias ``(d,)`` against ``(b, l, d)``).
Anything else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "gather",
    "concat",
    "softmax",
    "log_softmax",
    "layernorm",
    "gelu",
    "sum",
    "mean",
    "mse",
    "cross_entropy",
    "backward",
    "dft2",
    "numeric_grad",
    "grad_rel_error",
]


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One tape entry: the producing op, its inputs and the VJP closure."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple["Tensor", ...], vjp: Callable[[np.ndarray], None]):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """A dense float array that can take part in a differentiation graph.

    Args:
        data: Array-like values. Integer input is promoted to ``float32``.
        requires_grad: Mark the tensor as a leaf whose gradient is wanted.
        dtype: Optional ``float32`` / ``float64`` override.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), vjp)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} differ beyond a leading batch")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        _accumulate(a, _reduce_to(g, sa))
        _accumulate(b, _reduce_to(g, sb))

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        _accumulate(a, _reduce_to(g, sa))
        _accumulate(b, -_reduce_to(g, sb))

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, sa))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, sb))

    return _make(a.data * b.data, "mul", (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(c)

    def vjp(g):
        _accumulate(x, g * c)

    return _make(x.data * c, "scale", (x,), vjp)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    xd = x.data
    # in-place chains: this op runs on the widest activations in the model
    th = xd * xd
    th *= 0.044715
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def vjp(g):
        d = xd * xd
        d *= 3 * 0.044715 * _GELU_C
        d += _GELU_C
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= d
        sech2 *= xd
        sech2 += th
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        _accumulate(x, sech2)

    return _make(out, "gelu", (x,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every leading batch entry of
    ``a``, or carries exactly the same batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, gb)

    return _make(out, "matmul", (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))

    def vjp(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), "transpose", (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = x.shape

    def vjp(g):
        _accumulate(x, g.reshape(src))

    return _make(out, "reshape", (x,), vjp)


def gather(x: Tensor, indices: np.ndarray, axis: int = 1) -> Tensor:
    """Pick entries along ``axis`` independently for every leading row.

    ``indices`` has shape ``x.shape[:axis] + (k,)``; the result replaces the
    ``axis`` extent by ``k``.  Gradients are scattered back (repeats add up).
    """
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise DimensionError("gather indices must be integers")
    axis = axis % x.ndim
    if indices.shape[:-1] != x.shape[:axis] or indices.ndim != axis + 1:
        raise DimensionError(f"gather indices {indices.shape} do not match {x.shape} on axis {axis}")
    n = x.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise DimensionError(f"gather index out of range for extent {n}")
    idx = indices.reshape(indices.shape + (1,) * (x.ndim - axis - 1))
    out = np.take_along_axis(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        lead = np.indices(indices.shape, sparse=True)[:-1]
        np.add.at(gx, (*lead, indices), g)
        _accumulate(x, gx)

    return _make(out, "gather", (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or x.shape[:axis] != xs[0].shape[:axis] or \
                x.shape[axis + 1:] != xs[0].shape[axis + 1:]:
            raise DimensionError(f"concat shapes {[t.shape for t in xs]} differ off axis {axis}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _accumulate(x, part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), "concat", xs, vjp)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        _accumulate(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, "softmax", (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, "log_softmax", (x,), vjp)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply affine."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        if gamma.shape != (d,):
            raise DimensionError(f"layernorm gain {gamma.shape} != ({d},)")
        out = out * gamma.data
    if beta is not None:
        if beta.shape != (d,):
            raise DimensionError(f"layernorm offset {beta.shape} != ({d},)")
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def vjp(g):
        if gamma is not None and gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None and beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data if gamma is not None else g
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _make(out.astype(x.dtype, copy=False), "layernorm", parents, vjp)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, shape))

    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return _make(out, "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis, keepdims), 1.0 / count)


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements; ``b`` may be a constant array."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * g * diff
        _accumulate(a, gd)
        _accumulate(b, -gd)

    out = np.asarray((diff * diff).mean(), dtype=a.dtype)
    return _make(out, "mse", (a, b), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy against integer labels with label smoothing."""
    n, k = logits.shape
    target = np.full((n, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - smoothing
    return scale(sum(mul(log_softmax(logits, -1), target)), -1.0 / n)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar through its tape and consume the tape.

    Leaf gradients are added onto ``.grad`` and also returned as a map.

    Raises:
        ContractError: if ``loss`` is not a scalar, does not depend on any
            tracked tensor, or its graph was already consumed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        if t.node is None:
            leaves[t] = t.grad
            continue
        g = t.grad
        if g is not None:
            t.node.vjp(g)
        # intermediates drop their gradient and tape entry once used
        t.grad = None
        t.node = None
        t._consumed = True
    return leaves


# ---------------------------------------------------------------- analysis-only


def dft2(x) -> np.ndarray:
    """Centred amplitude of the 2-D DFT over the last two axes (no gradient)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    spec = np.fft.fft2(arr.astype(np.float64, copy=False), axes=(-2, -1))
    return np.abs(np.fft.fftshift(spec, axes=(-2, -1)))


# ---------------------------------------------------------------- grad checking


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
