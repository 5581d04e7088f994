"""Minimal reverse-mode differentiation engine over float64 numpy arrays.

Only the operations needed by the network and its losses are provided.
Every op records a vector-Jacobian closure; ``Tensor.backward`` walks the
graph in reverse topological order and accumulates parameter gradients.
Everything runs in float64 and is deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import NumericError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (pure inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Graph node holding a value, an accumulated gradient and a vjp closure."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        # only graph leaves (parameters, probed inputs) hold gradients
        self.grad = np.zeros_like(self.data) if (requires_grad and _vjp is None) else None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._vjp = _vjp
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self, grad=None):
        """Accumulate gradients of this (scalar or tensor) node into leaves."""
        if self._done:
            raise NumericError("backward already ran on this graph (stale trace)")
        if grad is None:
            if self.data.size != 1:
                raise NumericError("backward without explicit gradient requires a scalar")
            grad = np.ones_like(self.data)

        # iterative topological sort; graphs can be a few thousand nodes deep
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p is not None and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if parent is None or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._done = True

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, vjp):
    if _GRAD_ENABLED and any(p is not None and p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                         _unbroadcast(-g * a.data / b.data ** 2, b.data.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),))


def maximum_const(a, c: float):
    """Elementwise max with a constant; gradient is zero on the clipped side."""
    a = as_tensor(a)
    out = np.maximum(a.data, c)
    return _make(out, (a,), lambda g: (g * (a.data > c),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def stack(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(tensors), vjp)


def select(a, index: int, axis: int):
    """Pick one slice along an axis, e.g. the t-th time step."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(out, (a,), vjp)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice [start, start+length) along an axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make(out, (a,), vjp)


def pad_last(a, before: int, after: int):
    """Zero padding on the final axis."""
    a = as_tensor(a)
    widths = [(0, 0)] * (a.data.ndim - 1) + [(before, after)]
    out = np.pad(a.data, widths)
    n = a.data.shape[-1]

    def vjp(g):
        sl = [slice(None)] * a.data.ndim
        sl[-1] = slice(before, before + n)
        return (g[tuple(sl)],)

    return _make(out, (a,), vjp)


def take_rows(a, idx):
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp)


def depthwise_conv1d(x, w):
    """Per-channel 1-D cross-correlation with same (zero) padding.

    x: (B, V, T); w: (V, K) with K odd. Channel j is convolved only with
    kernel row j, so the output shape equals the input shape.
    """
    x, w = as_tensor(x), as_tensor(w)
    B, V, T = x.data.shape
    Vw, K = w.data.shape
    if Vw != V:
        raise NumericError(f"kernel bank has {Vw} channels, input has {V}")
    l = (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (l, l)))
    out = np.zeros((B, V, T))
    for k in range(K):
        out += xp[:, :, k:k + T] * w.data[:, k][None, :, None]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(K):
            gxp[:, :, k:k + T] += g * w.data[:, k][None, :, None]
            gw[:, k] = (g * xp[:, :, k:k + T]).sum(axis=(0, 2))
        return (gxp[:, :, l:l + T] if l else gxp, gw)

    return _make(out, (x, w), vjp)


def mahalanobis_sq(r, mu: np.ndarray, chol: np.ndarray):
    """Quadratic form (r - mu)^T (L L^T)^(-1) (r - mu) per row of r.

    mu and the lower-triangular factor L are constants (no gradient flows
    into them); computed via triangular solves, never an explicit inverse.
    """
    r = as_tensor(r)
    diff = r.data - mu[None, :]
    z = solve_triangular(chol, diff.T, lower=True)
    out = (z * z).sum(axis=0)

    def vjp(g):
        w = solve_triangular(chol.T, z, lower=False)
        return (2.0 * w.T * g[:, None],)

    return _make(out, (r,), vjp)


def log_softmax(logits):
    """Row-wise log softmax; the max shift is exact (its derivative cancels)."""
    logits = as_tensor(logits)
    c = logits.data.max(axis=-1, keepdims=True)
    shifted = sub(logits, Tensor(c))
    lse = log(tsum(exp(shifted), axis=-1, keepdims=True))
    return sub(shifted, lse)


def check_finite(t: Tensor, what: str):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
