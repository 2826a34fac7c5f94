"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and records the operations applied to it; backward()
walks the tape in reverse topological order accumulating gradients.  Only
float64 is supported.  The op set is exactly what the attention regressor
needs: broadcast arithmetic, matmul with stacked batching, reductions,
reshape/transpose/concat, embedding gather, GELU, softmax and layer norm.

Every helper also accepts plain ndarrays and then computes the forward value
without building a graph, so one model implementation serves both training
(Tensor parameters) and fast inference (ndarray parameters).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "matmul",
    "concat",
    "embedding",
    "gelu",
    "softmax",
    "layer_norm",
    "mean_squared_error",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    __array_ufunc__ = None  # numpy must defer to the reflected operators

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))

        def back(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = back
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return Tensor(other) * self ** -1.0

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data**exponent, _parents=(self,))

        def back(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))

        out._backward = back
        return out

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(Tensor(other), self)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,))
        src = self.data.shape

        def back(g):
            if self.requires_grad:
                self._accumulate(g.reshape(src))

        out._backward = back
        return out

    def transpose(self, axes):
        out = Tensor(self.data.transpose(axes), _parents=(self,))
        inv = np.argsort(axes)

        def back(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        out._backward = back
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        src = self.data.shape

        def back(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, src).astype(np.float64))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, src).astype(np.float64))

        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _is_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def matmul(a, b):
    """Matrix product with stacked (leading-dim) broadcasting."""
    if not _is_tensor(a, b):
        return np.matmul(a, b)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b))

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = back
    return out


def concat(parts, axis=0):
    """Concatenate tensors/arrays along an axis."""
    if not _is_tensor(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 _parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    out._backward = back
    return out


def embedding(table, idx):
    """Row gather table[idx]; idx is a plain integer array."""
    idx = np.asarray(idx)
    if not isinstance(table, Tensor):
        return table[idx]
    out = Tensor(table.data[idx], _parents=(table,))

    def back(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accumulate(gt)

    out._backward = back
    return out


def _gelu_np(x):
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad_np(x):
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu(x):
    """Smooth (tanh-form) GELU."""
    if not isinstance(x, Tensor):
        return _gelu_np(x)
    out = Tensor(_gelu_np(x.data), _parents=(x,))

    def back(g):
        if x.requires_grad:
            x._accumulate(g * _gelu_grad_np(x.data))

    out._backward = back
    return out


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis."""
    if not isinstance(x, Tensor):
        return _softmax_np(x)
    y = _softmax_np(x.data)
    out = Tensor(y, _parents=(x,))

    def back(g):
        if x.requires_grad:
            gy = g * y
            x._accumulate(gy - y * gy.sum(axis=-1, keepdims=True))

    out._backward = back
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply the learned affine map."""
    if not _is_tensor(x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * gain + bias
    x = x if isinstance(x, Tensor) else Tensor(x)
    gain = gain if isinstance(gain, Tensor) else Tensor(gain)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, _parents=(x, gain, bias))

    def back(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx_hat - m1 - xhat * m2))

    out._backward = back
    return out


def mean_squared_error(pred, target):
    """Scalar MSE over all elements; target is a constant array."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    diff = pred - target
    if isinstance(diff, Tensor):
        return (diff * diff).mean()
    return float(np.mean(diff * diff))
