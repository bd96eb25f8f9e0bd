"""Minimal reverse-mode differentiation over dense float64 arrays.

Every differentiable quantity in the package is a :class:`Node` wrapping a
NumPy array. Operations build the graph eagerly and register a backward rule;
:func:`backward` walks the graph in reverse topological order.

Broadcasting is deliberately absent: binary ops require identical shapes,
except :func:`scalar_mul`, :func:`add_scalar` and the explicit row-wise
:func:`add_bias`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .exceptions import GraphError, ShapeError

__all__ = [
    "Node",
    "leaf",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "add_scalar",
    "add_bias",
    "matmul",
    "tanh",
    "relu",
    "log",
    "square",
    "sqrt",
    "clip",
    "log_softmax",
    "sum",
    "mean",
    "concat",
    "slice",
    "take",
    "reshape",
    "backward",
    "grad",
    "finite_diff_check",
]


class Node:
    """A value in the computation graph.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that need none).
    """

    __slots__ = ("value", "parents", "op", "grad", "requires_grad", "backward_fn")

    def __init__(self, value, parents=(), op="leaf", backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value) -> Node:
    """A differentiable input (parameter or perturbation)."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _make(value, parents, op, backward_fn) -> Node:
    return Node(value, parents, op, backward_fn)


# --- elementwise -----------------------------------------------------------------


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("add", a, b)
    return _make(a.value + b.value, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("sub", a, b)
    return _make(a.value - b.value, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), "div", lambda g: (g / bv, -g * out / bv))


def scalar_mul(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), "scalar_mul", lambda g: (g * c,))


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value + c, (a,), "add_scalar", lambda g: (g,))


def add_bias(x: Node, b: Node) -> Node:
    """Add a length-H vector to every row of a (T, H) matrix."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _make(x.value + b.value, (x, b), "add_bias", lambda g: (g, g.sum(axis=0)))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def log(a: Node) -> Node:
    av = a.value
    return _make(np.log(av), (a,), "log", lambda g: (g / av,))


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), "square", lambda g: (2.0 * g * av,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return _make(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), "clip", lambda g: (g * inside,))


# --- linear algebra and reductions ---------------------------------------------


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def _bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), "matmul", _bw)


def log_softmax(a: Node) -> Node:
    """Log-softmax along the last axis."""
    if a.value.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax: zero-width axis")
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _make(out, (a,), "log_softmax", lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(a.value.sum(), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.value.ndim

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(a.value.sum(axis=ax), (a,), "sum", _bw)


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scalar_mul(sum(a, axis), 1.0 / n)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: no inputs")
    ndim = nodes[0].value.ndim
    ax = axis % ndim
    for n in nodes[1:]:
        if n.value.ndim != ndim or any(
            n.shape[d] != nodes[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {nodes[0].shape} and {n.shape}")
    bounds = np.cumsum([n.shape[ax] for n in nodes])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([n.value for n in nodes], axis=ax), nodes, "concat", _bw)


def slice(a: Node, index) -> Node:  # noqa: A001
    """Basic (non-fancy) indexing, e.g. ``slice(x, np.s_[2:5, :])``."""
    shape = a.shape
    out = a.value[index]

    def _bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(out, (a,), "slice", _bw)


def take(a: Node, indices) -> Node:
    """Gather rows (axis 0) with an integer index array of any shape.

    Repeated indices accumulate in the backward pass; this is how overlapping
    frames and context stacking stay differentiable.
    """
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis of length {n}")
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), "take", _bw)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    out = a.value.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(old),))


# --- backward --------------------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if not p.requires_grad:
                continue
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every differentiable leaf reachable from ``loss``.

    Leaf gradients are also stored on ``leaf.grad``.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            leaves[node] = g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = np.asarray(pg, dtype=np.float64)
    return leaves


def grad(f: Callable[[Node], Node], x) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar-valued graph builder at ``x``."""
    x_node = leaf(x)
    out = f(x_node)
    g = backward(out).get(x_node)
    if g is None:
        g = np.zeros_like(x_node.value)
    return out.item(), g


def finite_diff_check(f: Callable[[Node], Node], x, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    Relative error per coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = grad(f, x)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(constant(x)).item()
        flat[i] = orig - eps
        fm = f(constant(x)).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
