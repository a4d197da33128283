"""Minimal reverse-mode gradient engine over scalar and rank<=2 arrays.

Graphs are built eagerly (define-by-run): every operation computes its
value immediately, checks it for NaN/Inf, and records how to push a
gradient back to its parents. The primitive set is deliberately small:
add, multiply, matmul, exp, log, tanh, reciprocal, sum, square,
concatenate, slice and broadcast; everything else is composed from these.

Graph construction and the backward pass are single-threaded per graph;
independent graphs may live on separate threads.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ContractViolationError, NonFiniteError


class Node:
    __slots__ = ("value", "op", "parents", "vjp", "needs_grad", "name")

    def __init__(self, value, op="leaf", parents=(), vjp=None, needs_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp  # callable: output gradient -> tuple of parent gradients
        self.needs_grad = needs_grad
        self.name = name

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={np.shape(self.value)}, needs_grad={self.needs_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0))

    def __rsub__(self, other):
        return add(multiply(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return multiply(self, 1.0 / other)
        return multiply(self, reciprocal(other))

    def __getitem__(self, key):
        return take(self, key)


def constant(value) -> Node:
    """Leaf node that never receives a gradient."""
    v = np.asarray(value, dtype=float)
    if not np.isfinite(v).all():
        raise NonFiniteError("non-finite value in constant leaf")
    return Node(v)


def parameter(name: str, value) -> Node:
    """Leaf node gradients are collected for."""
    v = np.asarray(value, dtype=float)
    if not np.isfinite(v).all():
        raise NonFiniteError(f"non-finite value in parameter '{name}'")
    return Node(v, op="param", needs_grad=True, name=name)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, parents, vjp) -> Node:
    value = np.asarray(value)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    needs = any(p.needs_grad for p in parents)
    return Node(value, op, parents, vjp if needs else None, needs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after implicit numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _make(a.value + b.value, "add", (a, b), vjp)


def multiply(a, b) -> Node:
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape))

    return _make(a.value * b.value, "multiply", (a, b), vjp)


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolationError("matmul expects two rank-2 arrays")

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return _make(a.value @ b.value, "matmul", (a, b), vjp)


def exp(a) -> Node:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, "log", (a,), lambda g: (g / a.value,))


def tanh(a) -> Node:
    a = _lift(a)
    out = np.tanh(a.value)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def reciprocal(a) -> Node:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 / a.value
    return _make(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def square(a) -> Node:
    a = _lift(a)
    return _make(a.value * a.value, "square", (a,), lambda g: (2.0 * g * a.value,))


def asum(a, axis=None) -> Node:
    """Sum over all entries (axis=None) or along one axis."""
    a = _lift(a)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.value.sum(axis=axis), "sum", (a,), vjp)


def concat(nodes, axis=0) -> Node:
    nodes = tuple(_lift(n) for n in nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        parts = []
        for i, n in enumerate(nodes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(np.concatenate([n.value for n in nodes], axis=axis), "concatenate", nodes, vjp)


def take(a, key) -> Node:
    """Basic (non-fancy) indexing/slicing of a node."""
    a = _lift(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[key] += g
        return (out,)

    return _make(a.value[key], "slice", (a,), vjp)


def broadcast_to(a, shape) -> Node:
    a = _lift(a)

    def vjp(g):
        return (_unbroadcast(g, a.value.shape),)

    return _make(np.broadcast_to(a.value, shape).copy(), "broadcast", (a,), vjp)


def mean(a, axis=None) -> Node:
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return multiply(asum(a, axis=axis), 1.0 / n)


def evaluate(root: Node) -> np.ndarray:
    """Forward value of a graph (already computed eagerly at build time)."""
    if not np.isfinite(root.value).all():
        raise NonFiniteError(f"non-finite value at graph root '{root.op}'")
    return root.value


def _topological_order(root: Node) -> list[Node]:
    """Deterministic post-order over the needs_grad subgraph (iterative)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(root: Node, params: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """Gradients of a scalar-valued root with respect to named leaves.

    Parameters absent from the graph get a zero gradient of matching
    shape. Accumulation order is topological and deterministic, so
    repeated calls return identical arrays.
    """
    if np.size(root.value) != 1:
        raise ContractViolationError(
            f"gradient requires a scalar root, got shape {np.shape(root.value)}"
        )
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value, dtype=float)}
    if root.needs_grad:
        for node in reversed(_topological_order(root)):
            if node.vjp is None:
                continue  # leaves keep their accumulated gradient
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if not p.needs_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = np.asarray(pg, dtype=float) if acc is None else acc + pg
    result = {}
    for name, p in params.items():
        g = grads.get(id(p))
        result[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=float)
    return result
