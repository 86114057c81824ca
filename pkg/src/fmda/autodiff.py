"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation builds a node in a dynamic graph; ``backward`` walks the
graph in reverse topological order and accumulates gradients into leaf
tensors. The op set is exactly what the velocity network and the learned
SetConv lift need: broadcast arithmetic, matmul, reductions, a few smooth
nonlinearities, slicing/reshaping, and gather/scatter along axis 0.

All data is float64. Gradients accumulate in float64, so finite-difference
checks against these gradients are meaningful at ~1e-10 resolution.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A float64 ndarray plus the graph edge that produced it."""

    __slots__ = ("data", "grad", "parents", "_backward")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar
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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and accumulate grads into all ancestors."""
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g is node.grad else g
                else:
                    parent.grad = parent.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS: graphs from deep networks overflow Python recursion.
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor(out, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.data.shape),)

    return Tensor(out, (a,), back)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(parts), back)


def tslice(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    a = as_tensor(a)
    out = a.data[start:stop]

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return Tensor(out, (a,), back)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """out[i] = a[idx[i]] along axis 0; idx may repeat rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(out, (a,), back)


def scatter_rows(a, idx: np.ndarray, size: int) -> Tensor:
    """out[j] = sum of a[i] over i with idx[i] == j; out has `size` rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((size,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)

    def back(g):
        return (g[idx],)

    return Tensor(out, (a,), back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return Tensor(out, (a,), back)


def log1p(a) -> Tensor:
    a = as_tensor(a)
    out = np.log1p(a.data)

    def back(g):
        return (g / (1.0 + a.data),)

    return Tensor(out, (a,), back)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def back(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),)

    return Tensor(out, (a,), back)


def square(a) -> Tensor:
    return mul(a, a)
