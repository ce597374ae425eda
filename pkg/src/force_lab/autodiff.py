"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only quantities that depend on an input image ever need gradients, so model
parameters enter the graph as plain numpy constants and never get nodes of
their own.  Ops accept either a `Tensor` or anything `np.asarray` swallows;
non-Tensor operands are treated as constants.

All arithmetic is float64.  Graphs are built eagerly and freed with the
Python objects: call `backward()` on a scalar node, read `.grad` off the
leaves, throw the graph away.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "leaf",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose2d",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "total",
    "maximum_const",
    "getitem",
    "gather_pairs",
    "concat_rows",
    "reshape",
    "transpose",
]


class Tensor:
    """A node in the reverse-mode graph."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Seed a backward pass from this (scalar) node."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output node")
        order = _topo_order(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; the rhs may be a scalar, ndarray, or Tensor
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def leaf(value) -> Tensor:
    """A gradient-carrying input node."""
    return Tensor(value)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; graphs can be a few thousand nodes deep
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    # grads are never mutated in place, so holding views/shared arrays is safe
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    out_val = av + bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(g, bv.shape))

    return Tensor(out_val, parents, backward)


def sub(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    out_val = av - bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(-g, bv.shape))

    return Tensor(out_val, parents, backward)


def mul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    out_val = av * bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return Tensor(out_val, parents, backward)


def div(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    out_val = av / bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g / bv, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    return Tensor(out_val, parents, backward)


def neg(a) -> Tensor:
    av = _value(a)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, -g)

    return Tensor(-av, parents, backward)


def matmul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    out_val = av @ bv
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g @ bv.T)
        if isinstance(b, Tensor):
            _accumulate(b, av.T @ g)

    return Tensor(out_val, parents, backward)


def transpose2d(a) -> Tensor:
    av = _value(a)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g.T)

    return Tensor(av.T, parents, backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    av = _value(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g.transpose(inverse))

    return Tensor(av.transpose(axes), parents, backward)


def reshape(a, shape) -> Tensor:
    av = _value(a)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g.reshape(av.shape))

    return Tensor(av.reshape(shape), parents, backward)


def relu(a) -> Tensor:
    av = _value(a)
    mask = av > 0.0
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g * mask)

    return Tensor(av * mask, parents, backward)


def exp(a) -> Tensor:
    av = _value(a)
    out_val = np.exp(av)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g * out_val)

    return Tensor(out_val, parents, backward)


def log(a) -> Tensor:
    av = _value(a)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g / av)

    return Tensor(np.log(av), parents, backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; analytic Jacobian-vector backward."""
    av = _value(a)
    shifted = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_val = e / np.sum(e, axis=axis, keepdims=True)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            inner = np.sum(g * out_val, axis=axis, keepdims=True)
            _accumulate(a, out_val * (g - inner))

    return Tensor(out_val, parents, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    av = _value(a)
    shifted = av - np.max(av, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_val = shifted - lse
    soft = np.exp(out_val)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g - soft * np.sum(g, axis=axis, keepdims=True))

    return Tensor(out_val, parents, backward)


def layer_norm(a, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis; gain/bias are constants."""
    av = _value(a)
    mu = np.mean(av, axis=-1, keepdims=True)
    centered = av - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_val = xhat * gain + bias
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            gx = g * gain
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            _accumulate(a, inv * (gx - m1 - xhat * m2))

    return Tensor(out_val, parents, backward)


def total(a) -> Tensor:
    """Sum of all elements (scalar node)."""
    av = _value(a)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, np.broadcast_to(g, av.shape).copy())

    return Tensor(np.sum(av), parents, backward)


def maximum_const(a, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    av = _value(a)
    mask = av > floor
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g * mask)

    return Tensor(np.maximum(av, floor), parents, backward)


def getitem(a, key) -> Tensor:
    """Basic indexing/slicing (no fancy index arrays)."""
    av = _value(a)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            gp = np.zeros_like(av)
            gp[key] = g
            _accumulate(a, gp)

    return Tensor(av[key], parents, backward)


def gather_pairs(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick a[rows[i], cols[i]] for each i; scatter-add backward."""
    av = _value(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    parents = (a,) if isinstance(a, Tensor) else ()

    def backward(g):
        if isinstance(a, Tensor):
            gp = np.zeros_like(av)
            np.add.at(gp, (rows, cols), g)
            _accumulate(a, gp)

    return Tensor(av[rows, cols], parents, backward)


def concat_rows(parts: Sequence) -> Tensor:
    """Concatenate 2-D blocks along axis 0."""
    values = [_value(p) for p in parts]
    out_val = np.concatenate(values, axis=0)
    offsets = np.cumsum([0] + [v.shape[0] for v in values])
    parents = tuple(p for p in parts if isinstance(p, Tensor))

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Tensor):
                _accumulate(part, g[lo:hi])

    return Tensor(out_val, parents, backward)
