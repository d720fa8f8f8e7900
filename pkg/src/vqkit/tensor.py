"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are stored as float32; reductions (matmul inner products,
normalization statistics) accumulate in float64 so finite-difference
gradient checks stay tight at 32-bit precision. The tape is rebuilt
dynamically on every forward pass; only first-order gradients exist.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class Tensor:
    """Dense float32 array plus an optional gradient accumulator.

    Operations record their parents and a backward closure; ``backward()``
    on a scalar result walks the tape in reverse topological order.
    Gradients of leaves accumulate across backward calls until zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Populate grads of all tracked leaves with d(self)/d(leaf).

        Requires a scalar output. Intermediate grads are reset on entry;
        leaf grads accumulate across calls.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no tracked inputs")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.float32(1.0)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, float(other))
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float32)
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    out.grad = None
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 64-bit inner-product accumulation, 32-bit result
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), bw)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s32 = np.float32(s)

    def bw(g):
        if a.requires_grad:
            a.grad += g * s32

    return _make(a.data * s32, (a,), bw)


def add_const(a, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a.grad += g

    return _make(a.data + np.float32(c), (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def bw(g):
        if a.requires_grad:
            a.grad += g * sign

    return _make(np.abs(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    out = _mm64(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a.grad += _mm64(g, b.data.T)
        if b.requires_grad:
            b.grad += _mm64(a.data.T, g)

    return _make(out, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def bw(g):
        if a.requires_grad:
            a.grad += g.T

    return _make(a.data.T.copy(), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape

    def bw(g):
        if a.requires_grad:
            a.grad += g.reshape(orig)

    return _make(a.data.reshape(shape), (a,), bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Narrow the last axis to [start, stop)."""
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a.grad[..., start:stop] += g

    return _make(a.data[..., start:stop].copy(), (a,), bw)


def concat_last(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def bw(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.grad += g[..., off:off + w]
            off += w

    return _make(out, tuple(parts), bw)


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D table; gradient scatter-adds back into it."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")
    out = table.data[idx]

    def bw(g):
        if table.requires_grad:
            np.add.at(table.grad, idx, g)

    return _make(out, (table,), bw)


def weighted_rows(table, weights, indices) -> Tensor:
    """Per-row weighted combination of table rows.

    out[s] = sum_j weights[s, j] * table[indices[s, j]]; differentiable in
    both the table and the weights. ``indices`` is a constant [S, n] array.
    """
    table, weights = as_tensor(table), as_tensor(weights)
    idx = np.asarray(indices)
    if table.data.ndim != 2 or weights.data.ndim != 2:
        raise ValueError("weighted_rows expects 2-D table and weights")
    if idx.shape != weights.data.shape:
        raise ValueError("indices and weights must have equal shapes")
    gathered = table.data[idx]  # [S, n, d]
    out = np.einsum(
        "sn,snd->sd",
        weights.data.astype(np.float64),
        gathered.astype(np.float64),
    ).astype(np.float32)

    def bw(g):
        g64 = g.astype(np.float64)
        if weights.requires_grad:
            gw = np.einsum("snd,sd->sn", gathered.astype(np.float64), g64)
            weights.grad += gw.astype(np.float32)
        if table.requires_grad:
            contrib = weights.data[:, :, None].astype(np.float64) * g64[:, None, :]
            flat = contrib.reshape(-1, table.data.shape[1]).astype(np.float32)
            np.add.at(table.grad, idx.reshape(-1), flat)

    return _make(out, (table, weights), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a) -> Tensor:
    """Numerically stable softmax along the last axis."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    out = s.astype(np.float32)

    def bw(g):
        g64 = g.astype(np.float64)
        dot = (g64 * s).sum(axis=-1, keepdims=True)
        a.grad += (s * (g64 - dot)).astype(np.float32)

    return _make(out, (a,), bw)


def layer_norm(a) -> Tensor:
    """Zero-mean unit-variance normalization along the last axis.

    No learned affine; the epsilon-stabilized denominator uses the biased
    per-row variance. Statistics accumulate in float64.
    """
    a = as_tensor(a)
    if a.data.ndim < 1 or a.data.shape[-1] < 2:
        raise ValueError("layer_norm needs a last extent of at least 2")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = (x - mu) * inv
    out = y.astype(np.float32)
    h = a.data.shape[-1]

    def bw(g):
        g64 = g.astype(np.float64)
        s1 = g64.sum(axis=-1, keepdims=True)
        s2 = (g64 * y).sum(axis=-1, keepdims=True)
        gx = (inv / h) * (h * g64 - s1 - y * s2)
        a.grad += gx.astype(np.float32)

    return _make(out, (a,), bw)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = (0.5 * x * (1.0 + t)).astype(np.float32)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        a.grad += (g.astype(np.float64) * dy).astype(np.float32)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = np.float32(a.data.sum(dtype=np.float64))

    def bw(g):
        if a.requires_grad:
            a.grad += g

    return _make(out, (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    count = a.data.size
    out = np.float32(a.data.sum(dtype=np.float64) / count)
    inv = np.float32(1.0 / count)

    def bw(g):
        if a.requires_grad:
            a.grad += g * inv

    return _make(out, (a,), bw)


def mean_square_error(a, b) -> Tensor:
    """Mean over elements of the squared difference."""
    d = sub(a, b)
    return mean(mul(d, d))
