"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps a float64 ndarray plus the closure that routes its output
gradient into its parents. Graphs are built eagerly by the ops in
:mod:`nirskill.nn.ops`; ``backward()`` runs an iterative topological sweep.
Nodes whose inputs carry no gradient requirement are constants: no closure
is allocated for them, so inference builds no graph.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "as_tensor", "make_op", "unbroadcast"]


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce `grad` back to `shape` (adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """float64 value array + gradient array of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse sweep from a scalar output, accumulating leaf gradients."""
        if self.data.size != 1:
            raise ValueError("backward() must start from a scalar")
        # Iterative DFS topological order; graphs from long loss chains can
        # exceed the recursion limit.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- operator sugar (composition helpers; heavy ops live in ops.py) ----

    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, as_tensor(-1.0))

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def reshape(self, *shape):
        return _reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Create an op output; skips closure allocation for constant subgraphs."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _accum(p: Tensor, g: np.ndarray) -> None:
    if p.requires_grad:
        p.grad += g


def _add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accum(a, unbroadcast(g, a.data.shape))
        _accum(b, unbroadcast(g, b.data.shape))

    return make_op(out_data, (a, b), backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        _accum(a, unbroadcast(g * b.data, a.data.shape))
        _accum(b, unbroadcast(g * a.data, b.data.shape))

    return make_op(out_data, (a, b), backward)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        _accum(a, np.broadcast_to(gx, a.data.shape).copy())

    return make_op(out_data, (a,), backward)


def _reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return make_op(out_data, (a,), backward)
