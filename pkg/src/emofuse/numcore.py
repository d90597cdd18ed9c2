"""Small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built on the fly (define-by-run) and thrown away after each step.
Only the operations the emotion-fusion model needs are provided; a handful of them
(softmax, log-softmax, log-sum-exp, layer norm, cosine similarity) are fused
with hand-written backward rules for stability and speed.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

EPS = 1e-8

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the computation graph: value, gradient slot and provenance."""

    __slots__ = ("value", "_grad", "requires_grad", "_parents", "_backward", "op", "_id")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""
        self._id = next(_ids)

    # -- gradient slot -------------------------------------------------
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self._grad += g

    # -- conveniences --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return _node(out, (a, b), bw, "div")


def power(x: Tensor, p: float) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g * p * x.value ** (p - 1))

    return _node(x.value**p, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: x._accumulate(g * out), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.value), (x,), lambda g: x._accumulate(g / x.value), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.value)
    return _node(out, (x,), lambda g: x._accumulate(g * 0.5 / out), "sqrt")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _node(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)), "sigmoid")


def _silu_grad(v: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + v * (1.0 - s))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); the smooth gated activation used throughout the model."""
    s = _sigmoid(x.value)
    return _node(x.value * s, (x,), lambda g: x._accumulate(g * _silu_grad(x.value, s)), "silu")


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    v = x.value
    out = np.clip(v, lo, hi)
    inside = np.ones(v.shape, dtype=bool)
    if lo is not None:
        inside &= v >= lo
    if hi is not None:
        inside &= v <= hi
    return _node(out, (x,), lambda g: x._accumulate(g * inside), "clip")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)
    return _node(out, (x,), lambda g: x._accumulate(_expand_reduced(g, x.shape, axis, keepdims)), "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.value.mean(axis=axis, keepdims=keepdims)
    count = x.value.size / max(out.size, 1) if x.value.size else 1.0

    def bw(g):
        x._accumulate(_expand_reduced(g, x.shape, axis, keepdims) / count)

    return _node(out, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.value.reshape(shape)
    return _node(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (x,), lambda g: x._accumulate(np.transpose(g, inv)), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.value, a, b)
    return _node(out, (x,), lambda g: x._accumulate(np.swapaxes(g, a, b)), "swapaxes")


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in items)


def getitem(x: Tensor, key) -> Tensor:
    out = x.value[key]
    basic = _is_basic_index(key)

    def bw(g):
        gx = np.zeros_like(x.value)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        x._accumulate(gx)

    return _node(np.array(out, copy=True), (x,), bw, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; ``indices`` may be any integer array shape."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.value, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.value)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            moved = np.moveaxis(gx, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim))))
        x._accumulate(gx)

    return _node(out, (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    out = np.concatenate([t.value for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _node(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    out = np.stack([t.value for t in xs], axis=axis)

    def bw(g):
        for k, t in enumerate(xs):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))

    return _node(out, xs, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(Batched) matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _node(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# fused, numerically stable primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.value
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), bw, "softmax")


def _safe_max(v: np.ndarray, axis) -> np.ndarray:
    m = v.max(axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) via max shift; entries equal to -inf are ignored."""
    v = x.value
    m = _safe_max(v, axis)
    lse = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(gk * np.exp(v - lse))

    return _node(out, (x,), bw, "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.value
    m = _safe_max(v, axis)
    lse = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    out = v - lse

    def bw(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.value
            x._accumulate(
                inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            )

    return _node(out, (x, gain, bias), bw, "layer_norm")


def cosine_matrix(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """Pairwise cosine similarity between rows: out[i, j] = sim(a_i, b_j).

    The denominator is ``max(|a_i| |b_j|, eps)`` so zero rows give 0 instead
    of NaN.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix needs (P,d) and (Q,d) operands, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    na = np.sqrt((av * av).sum(axis=1))
    nb = np.sqrt((bv * bv).sum(axis=1))
    outer = np.outer(na, nb)
    unclipped = outer > eps
    denom = np.where(unclipped, outer, eps)
    sims = (av @ bv.T) / denom

    def bw(g):
        r = g / denom
        w = g * sims * unclipped
        if a.requires_grad:
            na2 = np.where(na > 0, na * na, 1.0)
            a._accumulate(r @ bv - (w.sum(axis=1) / na2)[:, None] * av)
        if b.requires_grad:
            nb2 = np.where(nb > 0, nb * nb, 1.0)
            b._accumulate(r.T @ av - (w.sum(axis=0) / nb2)[:, None] * bv)

    return _node(sims, (a, b), bw, "cosine")


def cosine_similarity(u: Tensor, v: Tensor, eps: float = EPS) -> Tensor:
    """Cosine similarity of two vectors, as a scalar node."""
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine_similarity needs two vectors of equal length, got {u.shape} and {v.shape}")
    d = u.shape[0]
    return reshape(cosine_matrix(reshape(u, (1, d)), reshape(v, (1, d)), eps), ())


# ---------------------------------------------------------------------------
# backward sweep and finite differences
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into every reachable requires-grad node.

    Node ids grow with creation order, so sorting reachable nodes by
    descending id is a valid reverse topological order.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    seen = {root._id: root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack_.append(p)
    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)
    root._accumulate(np.ones_like(root.value))
    for node in order:
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(f: Callable[[np.ndarray], object], theta: np.ndarray, h: float = 1e-6,
                     coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference derivative of ``f`` with respect to ``theta``.

    ``theta`` is perturbed in place (and restored), so ``f`` may ignore its
    argument and read shared state instead.  ``f`` may return a scalar or an
    array; the result has shape ``theta.shape + out.shape``, or
    ``(len(coords),) + out.shape`` when only some flat coordinates are probed.
    """
    flat = theta.reshape(-1)
    if not np.shares_memory(flat, theta):
        raise ValueError("theta must be a contiguous array so it can be perturbed in place")
    idx = range(flat.size) if coords is None else coords
    rows = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        try:
            up = np.asarray(f(theta), dtype=np.float64)
            flat[i] = orig - h
            down = np.asarray(f(theta), dtype=np.float64)
        finally:
            flat[i] = orig
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
            raise NumericalError(f"non-finite function value when perturbing coordinate {i}")
        rows.append((up - down) / (2.0 * h))
    out = np.stack(rows) if rows else np.zeros((0,))
    if coords is None:
        return out.reshape(theta.shape + out.shape[1:])
    return out


class RngStream:
    """Seeded random stream (PCG64) with deterministic sub-streams."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def child(self, *key: int) -> RngStream:
        """Independent stream derived from this seed and an integer key path."""
        ss = np.random.SeedSequence([self.seed, *key])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, size=None, scale: float = 1.0, loc=0.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
