"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the primitive set the training objective needs: affine maps,
ReLU, logistic, exp/log/sqrt, reductions, concatenation, row gathering,
clipping, softmax cross-entropy and dense matrix inversion. Gradients through
the inverse use dW = -W^T g W^T, so losses may differentiate through the
attribute-propagation solve.
"""

import numpy as np

from .exceptions import ContractError
from .numkernel import inv_small

SQRT_GRAD_FLOOR = 1e-12


class Tensor:
    """A node in the computation graph. Leaf tensors have no parents; calling
    ``backward()`` on a scalar output accumulates ``grad`` on every node."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    # defer to Tensor's reflected operators when mixed with ndarrays
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def backward(self):
        if self.value.ndim != 0:
            raise ContractError("backward() requires a scalar output")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def ensure(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = ensure(a), ensure(b)
    out_val = a.value + b.value

    def back(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return Tensor(out_val, (a, b), back)


def sub(a, b):
    a, b = ensure(a), ensure(b)
    out_val = a.value - b.value

    def back(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(-g, b.value.shape))

    return Tensor(out_val, (a, b), back)


def mul(a, b):
    a, b = ensure(a), ensure(b)
    out_val = a.value * b.value

    def back(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return Tensor(out_val, (a, b), back)


def div(a, b):
    a, b = ensure(a), ensure(b)
    out_val = a.value / b.value

    def back(g):
        _acc(a, _unbroadcast(g / b.value, a.value.shape))
        _acc(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Tensor(out_val, (a, b), back)


def neg(a):
    a = ensure(a)

    def back(g):
        _acc(a, -g)

    return Tensor(-a.value, (a,), back)


def matmul(a, b):
    a, b = ensure(a), ensure(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractError("matmul supports 2-D operands only")
    out_val = a.value @ b.value

    def back(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return Tensor(out_val, (a, b), back)


def transpose(a):
    a = ensure(a)

    def back(g):
        _acc(a, g.T)

    return Tensor(a.value.T, (a,), back)


def reshape(a, shape):
    a = ensure(a)
    orig = a.value.shape

    def back(g):
        _acc(a, g.reshape(orig))

    return Tensor(a.value.reshape(shape), (a,), back)


def relu(a):
    a = ensure(a)
    mask = a.value > 0.0

    def back(g):
        _acc(a, g * mask)

    return Tensor(a.value * mask, (a,), back)


def sigmoid(a):
    a = ensure(a)
    x = a.value
    s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        _acc(a, g * s * (1.0 - s))

    return Tensor(s, (a,), back)


def exp(a):
    a = ensure(a)
    e = np.exp(a.value)

    def back(g):
        _acc(a, g * e)

    return Tensor(e, (a,), back)


def log(a):
    a = ensure(a)

    def back(g):
        _acc(a, g / a.value)

    return Tensor(np.log(a.value), (a,), back)


def sqrt(a):
    a = ensure(a)
    r = np.sqrt(a.value)

    def back(g):
        _acc(a, g * 0.5 / np.maximum(r, SQRT_GRAD_FLOOR))

    return Tensor(r, (a,), back)


def square(a):
    a = ensure(a)

    def back(g):
        _acc(a, g * 2.0 * a.value)

    return Tensor(a.value * a.value, (a,), back)


def tsum(a, axis=None, keepdims=False):
    a = ensure(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, a.value.shape))

    return Tensor(out_val, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = ensure(a)
    if axis is None:
        count = a.value.size
    else:
        count = a.value.shape[axis]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def concat(tensors, axis=0):
    tensors = [ensure(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    out_val = np.concatenate([t.value for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    return Tensor(out_val, tuple(tensors), back)


def gather_rows(a, idx):
    a = ensure(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, idx, g)
        _acc(a, buf)

    return Tensor(a.value[idx], (a,), back)


def clip(a, lo, hi):
    a = ensure(a)
    inside = (a.value >= lo) & (a.value <= hi)

    def back(g):
        _acc(a, g * inside)

    return Tensor(np.clip(a.value, lo, hi), (a,), back)


def clip_min(a, lo):
    a = ensure(a)
    inside = a.value >= lo

    def back(g):
        _acc(a, g * inside)

    return Tensor(np.maximum(a.value, lo), (a,), back)


def inverse(a):
    """Matrix inverse; forward uses the same pivoted elimination as the plain
    kernels so the two code paths agree bitwise."""
    a = ensure(a)
    w = inv_small(a.value)

    def back(g):
        _acc(a, -(w.T @ g @ w.T))

    return Tensor(w, (a,), back)


def softmax_cross_entropy(logits, labels):
    """Per-row softmax cross-entropy against integer labels. Returns a length-n
    loss vector; mean/sum composition is left to the caller."""
    logits = ensure(logits)
    labels = np.asarray(labels, dtype=np.intp)
    v = logits.value
    if v.ndim != 2 or labels.shape != (v.shape[0],):
        raise ContractError("softmax_cross_entropy expects (n, c) logits and n labels")
    if labels.size and (labels.min() < 0 or labels.max() >= v.shape[1]):
        raise ContractError("label out of range")
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + v.max(axis=1)
    losses = lse - v[np.arange(v.shape[0]), labels]

    def back(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(v.shape[0]), labels] -= 1.0
        _acc(logits, p * np.asarray(g)[:, None])

    return Tensor(losses, (logits,), back)
