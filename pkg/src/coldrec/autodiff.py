"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs on an implicit tape (the parent graph of
the output tensor). ``Tensor.backward()`` replays the tape in reverse
topological order, visiting each node exactly once and accumulating
gradients additively at fan-out points. Only the primitives needed by the
model layers are provided; there is no general broadcasting beyond
row-wise bias addition.

All training math is float64. NaN/Inf anywhere raises ``NumericError``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_GRAD_ENABLED = True
FINITE_CHECKS = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, where: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """A dense float64 array plus the tape bookkeeping for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backfn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor input")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backfn: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Backprop from a scalar output through the recorded tape."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backfn is not None and node.grad is not None:
                node._backfn()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backfn, opname: str) -> Tensor:
    _check_finite(out_data, opname)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._parents = ()
    out._backfn = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backfn = backfn(out)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        data = a.data + c

        def backfn(out):
            def _back():
                _accum(a, out.grad)
            return _back

        return _make(data, (a,), backfn, "add")
    if a.shape == b.shape:
        data = a.data + b.data

        def backfn(out):
            def _back():
                _accum(a, out.grad)
                _accum(b, out.grad)
            return _back

        return _make(data, (a, b), backfn, "add")
    # row-broadcast bias: (n, d) + (d,)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        data = a.data + b.data[None, :]

        def backfn(out):
            def _back():
                _accum(a, out.grad)
                _accum(b, out.grad.sum(axis=0))
            return _back

        return _make(data, (a, b), backfn, "add")
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b)) if isinstance(b, Tensor) else add(a, -float(b))


def rsub_const(c: float, a: Tensor) -> Tensor:
    """c - a for a python constant c."""
    data = float(c) - a.data

    def backfn(out):
        def _back():
            _accum(a, -out.grad)
        return _back

    return _make(data, (a,), backfn, "rsub_const")


def neg(a: Tensor) -> Tensor:
    data = -a.data

    def backfn(out):
        def _back():
            _accum(a, -out.grad)
        return _back

    return _make(data, (a,), backfn, "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        data = a.data * c

        def backfn(out):
            def _back():
                _accum(a, out.grad * c)
            return _back

        return _make(data, (a,), backfn, "mul")
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def backfn(out):
        def _back():
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)
        return _back

    return _make(data, (a, b), backfn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    an, bn = a.data.ndim, b.data.ndim
    if an == 2 and bn == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backfn(out):
            def _back():
                _accum(a, out.grad @ b.data.T)
                _accum(b, a.data.T @ out.grad)
            return _back

        return _make(data, (a, b), backfn, "matmul")
    if an == 2 and bn == 1:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backfn(out):
            def _back():
                _accum(a, np.outer(out.grad, b.data))
                _accum(b, a.data.T @ out.grad)
            return _back

        return _make(data, (a, b), backfn, "matvec")
    if an == 1 and bn == 2:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backfn(out):
            def _back():
                _accum(a, b.data @ out.grad)
                _accum(b, np.outer(a.data, out.grad))
            return _back

        return _make(data, (a, b), backfn, "vecmat")
    raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    data = np.array(a.data @ b.data)

    def backfn(out):
        def _back():
            g = float(out.grad)
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        return _back

    return _make(data, (a, b), backfn, "dot")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need 2-d tensor, got {a.shape}")
    data = a.data.T.copy()

    def backfn(out):
        def _back():
            _accum(a, out.grad.T)
        return _back

    return _make(data, (a,), backfn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backfn(out):
        def _back():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(sl)])
        return _back

    return _make(data, tuple(tensors), backfn, "concat")


def rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"rows: need 2-d tensor, got {a.shape}")
    data = a.data[idx]

    def backfn(out):
        def _back():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)
        return _back

    return _make(data, (a,), backfn, "rows")


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols: need 2-d tensor, got {a.shape}")
    data = a.data[:, lo:hi].copy()

    def backfn(out):
        def _back():
            g = np.zeros_like(a.data)
            g[:, lo:hi] = out.grad
            _accum(a, g)
        return _back

    return _make(data, (a,), backfn, "slice_cols")


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors of equal length into a 2-d tensor."""
    if not vectors:
        raise DimensionError("stack_rows: empty input list")
    for v in vectors:
        if v.data.ndim != 1 or v.shape != vectors[0].shape:
            raise DimensionError(
                f"stack_rows: inconsistent shapes {v.shape} vs {vectors[0].shape}")
    data = np.stack([v.data for v in vectors], axis=0)

    def backfn(out):
        def _back():
            for i, v in enumerate(vectors):
                _accum(v, out.grad[i])
        return _back

    return _make(data, tuple(vectors), backfn, "stack_rows")


def stack1d(scalars: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d vector."""
    data = np.array([s.item() for s in scalars])

    def backfn(out):
        def _back():
            for i, s in enumerate(scalars):
                _accum(s, np.array(out.grad[i]))
        return _back

    return _make(data, tuple(scalars), backfn, "stack1d")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backfn(out):
        def _back():
            _accum(a, out.grad * (a.data > 0.0))
        return _back

    return _make(data, (a,), backfn, "relu")


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def backfn(out):
        def _back():
            _accum(a, out.grad * data * (1.0 - data))
        return _back

    return _make(data, (a,), backfn, "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backfn(out):
        def _back():
            _accum(a, out.grad * (1.0 - data * data))
        return _back

    return _make(data, (a,), backfn, "tanh")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backfn(out):
        def _back():
            _accum(a, out.grad * data)
        return _back

    return _make(data, (a,), backfn, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)

    def backfn(out):
        def _back():
            _accum(a, out.grad / a.data)
        return _back

    return _make(data, (a,), backfn, "log")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    data = np.logaddexp(0.0, a.data)

    def backfn(out):
        def _back():
            _accum(a, out.grad * _sigmoid_np(a.data))
        return _back

    return _make(data, (a,), backfn, "softplus")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backfn(out):
        def _back():
            gdot = (out.grad * data).sum(axis=axis, keepdims=True)
            _accum(a, data * (out.grad - gdot))
        return _back

    return _make(data, (a,), backfn, "softmax")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.array(a.data.mean())

    def backfn(out):
        def _back():
            _accum(a, np.full_like(a.data, float(out.grad) / n))
        return _back

    return _make(data, (a,), backfn, "mean")


def mean_axis0(a: Tensor) -> Tensor:
    """Column means of a 2-d tensor: (n, d) -> (d,)."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_axis0: need 2-d tensor, got {a.shape}")
    n = a.shape[0]
    data = a.data.mean(axis=0)

    def backfn(out):
        def _back():
            _accum(a, np.repeat(out.grad[None, :] / n, n, axis=0))
        return _back

    return _make(data, (a,), backfn, "mean_axis0")


def total(a: Tensor) -> Tensor:
    """Sum of all entries."""
    data = np.array(a.data.sum())

    def backfn(out):
        def _back():
            _accum(a, np.full_like(a.data, float(out.grad)))
        return _back

    return _make(data, (a,), backfn, "total")


def sum_axis1(a: Tensor) -> Tensor:
    """Row sums of a 2-d tensor: (n, d) -> (n,)."""
    if a.data.ndim != 2:
        raise DimensionError(f"sum_axis1: need 2-d tensor, got {a.shape}")
    data = a.data.sum(axis=1)

    def backfn(out):
        def _back():
            _accum(a, np.repeat(out.grad[:, None], a.shape[1], axis=1))
        return _back

    return _make(data, (a,), backfn, "sum_axis1")


def segment_mean(x: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Per-segment row means: (m, d) rows grouped by seg_ids -> (num_segments, d).

    Empty segments yield zero rows and receive no gradient.
    """
    seg = np.asarray(seg_ids, dtype=np.int64)
    if x.data.ndim != 2 or seg.shape[0] != x.shape[0]:
        raise DimensionError(f"segment_mean: rows {x.shape} vs segments {seg.shape}")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    sums = np.zeros((num_segments, x.shape[1]))
    np.add.at(sums, seg, x.data)
    data = sums / safe[:, None]

    def backfn(out):
        def _back():
            _accum(x, out.grad[seg] / safe[seg][:, None])
        return _back

    return _make(data, (x,), backfn, "segment_mean")


def segment_sum(x: Tensor, seg_ids, num_segments: int) -> Tensor:
    seg = np.asarray(seg_ids, dtype=np.int64)
    if x.data.ndim != 2 or seg.shape[0] != x.shape[0]:
        raise DimensionError(f"segment_sum: rows {x.shape} vs segments {seg.shape}")
    sums = np.zeros((num_segments, x.shape[1]))
    np.add.at(sums, seg, x.data)

    def backfn(out):
        def _back():
            _accum(x, out.grad[seg])
        return _back

    return _make(sums, (x,), backfn, "segment_sum")


def scale_rows(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply each row of (n, d) by a constant per-row factor."""
    f = np.asarray(factors, dtype=np.float64)
    if x.data.ndim != 2 or f.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows: {x.shape} vs factors {f.shape}")
    data = x.data * f[:, None]

    def backfn(out):
        def _back():
            _accum(x, out.grad * f[:, None])
        return _back

    return _make(data, (x,), backfn, "scale_rows")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-d vectors; raises on zero norm."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine: incompatible shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine of a zero-norm vector is undefined")
    c = float(a.data @ b.data) / (na * nb)
    data = np.array(c)

    def backfn(out):
        def _back():
            g = float(out.grad)
            _accum(a, g * (b.data / (na * nb) - c * a.data / (na * na)))
            _accum(b, g * (a.data / (na * nb) - c * b.data / (nb * nb)))
        return _back

    return _make(data, (a, b), backfn, "cosine")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (n, d) tensors -> (n,)."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"cosine_rows: incompatible shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericError("cosine of a zero-norm row is undefined")
    dots = np.einsum("ij,ij->i", a.data, b.data)
    c = dots / (na * nb)

    def backfn(out):
        def _back():
            g = out.grad
            _accum(a, (g / (na * nb))[:, None] * b.data - (g * c / (na * na))[:, None] * a.data)
            _accum(b, (g / (na * nb))[:, None] * a.data - (g * c / (nb * nb))[:, None] * b.data)
        return _back

    return _make(c, (a, b), backfn, "cosine_rows")


def block_attention(q: Tensor, k: Tensor, v: Tensor, block: int) -> Tensor:
    """Scaled dot-product attention within consecutive row blocks of size
    ``block``: rows attend only to rows of their own block. Inputs are
    (g*block, w); output has the same shape."""
    if q.data.ndim != 2 or q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(
            f"block_attention: need equal 2-d shapes, got {q.shape}, {k.shape}, {v.shape}")
    rows_, w = q.shape
    if block < 1 or rows_ % block != 0:
        raise DimensionError(f"block_attention: {rows_} rows not divisible by {block}")
    g = rows_ // block
    scale_f = 1.0 / math.sqrt(w)
    q3 = q.data.reshape(g, block, w)
    k3 = k.data.reshape(g, block, w)
    v3 = v.data.reshape(g, block, w)
    scores = np.matmul(q3, np.swapaxes(k3, 1, 2)) * scale_f
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    out3 = np.matmul(p, v3)

    def backfn(out):
        def _back():
            do = out.grad.reshape(g, block, w)
            dv = np.matmul(np.swapaxes(p, 1, 2), do)
            dp = np.matmul(do, np.swapaxes(v3, 1, 2))
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            dq = np.matmul(ds, k3) * scale_f
            dk = np.matmul(np.swapaxes(ds, 1, 2), q3) * scale_f
            _accum(q, dq.reshape(rows_, w))
            _accum(k, dk.reshape(rows_, w))
            _accum(v, dv.reshape(rows_, w))
        return _back

    return _make(out3.reshape(rows_, w), (q, k, v), backfn, "block_attention")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_k)) v for 2-d q, k, v.

    Composes recorded primitives, so the gradient comes from the tape.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError(
            f"scaled_dot_attention: need 2-d inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"scaled_dot_attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    dk = q.shape[1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare the tape gradient of scalar f at x against central differences.

    Returns the max relative error over all coordinates of x, with the
    relative denominator floored at 1 so near-zero gradients compare
    absolutely. Never raises on disagreement; the caller asserts.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    x.grad = None
    was_leaf = x.requires_grad
    x.requires_grad = True
    out = f(x)
    out.backward()
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = was_leaf
    x.grad = None

    flat = x.data.reshape(-1)
    g_fd = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            g_fd[i] = (fp - fm) / (2.0 * eps)
    ga = g_ad.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(ga), np.abs(g_fd)))
    return float(np.max(np.abs(ga - g_fd) / denom))


def grad_check_multi(f: Callable[..., Tensor], xs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """grad_check over several inputs of a scalar function; returns the worst error."""
    worst = 0.0
    for i, x in enumerate(xs):
        def fi(xi, _i=i):
            args = list(xs)
            args[_i] = xi
            return f(*args)
        worst = max(worst, grad_check(fi, x, eps))
    return worst
