"""Float64 tensor arithmetic with a define-by-run reverse-mode tape.

Tensors are contiguous row-major numpy float64 arrays.  Every op in this
module runs in two modes: with plain arrays it is ordinary numpy, and as soon
as any argument is a :class:`Node` the op is recorded so that
:func:`backward` can push adjoints back to the leaves.  The tape is rebuilt
on every forward pass; there is no retained graph state between calls.

The same formula code can therefore serve both the trainable path (Nodes)
and fast evaluation / oracle paths (raw arrays).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "Rng",
    "add",
    "as_tensor",
    "backward",
    "clamp_min",
    "div",
    "exp",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "softplus",
    "sqrt",
    "sub",
    "sum",
    "value_of",
]

_MASK64 = (1 << 64) - 1


def as_tensor(data) -> np.ndarray:
    """Coerce to a contiguous float64 array (0-d stays 0-d)."""
    return np.asarray(data, dtype=np.float64, order="C")


def value_of(x) -> np.ndarray:
    """Underlying array of a Node, or the input coerced to float64."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


class Node:
    """One vertex of the tape: a value, its adjoint, and how it was made.

    Leaf Nodes (parameters, inputs) have no parents.  After backward() the
    ``grad`` field holds d(loss)/d(value) with the same shape as ``value``.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # Make numpy defer mixed array-Node arithmetic to our reflected
    # operators instead of element-iterating into an object array.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None):
        self.value = as_tensor(value)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def backward(self):
        backward(self)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def _is_node(x) -> bool:
    return isinstance(x, Node)


def _record(value, parent_vjps) -> Node:
    """Build a tape Node from (parent, pullback) pairs, skipping constants."""
    pairs = [(p, f) for p, f in parent_vjps if _is_node(p)]
    parents = tuple(p for p, _ in pairs)
    fns = tuple(f for _, f in pairs)

    def vjp(g):
        return tuple(f(g) for f in fns)

    return Node(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g.reshape(shape), order="C")


def backward(loss: Node) -> None:
    """Reverse sweep: fill grad on every Node reachable from ``loss``.

    The loss must be a scalar (size-1).  Each Node's pullback runs exactly
    once, in reverse topological order.
    """
    if not _is_node(loss):
        raise TypeError("backward: loss is not on the tape")
    if loss.value.size != 1:
        raise ValueError(
            f"backward: loss must be a scalar, got shape {loss.value.shape}"
        )

    # Iterative DFS; recursion depth would be O(graph depth) otherwise.
    order = []
    seen = set()
    stack = [(loss, False)]
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

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if not (_is_node(a) or _is_node(b)):
        return out
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g, va.shape)),
            (b, lambda g: _unbroadcast(g, vb.shape)),
        ],
    )


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if not (_is_node(a) or _is_node(b)):
        return out
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g, va.shape)),
            (b, lambda g: _unbroadcast(-g, vb.shape)),
        ],
    )


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if not (_is_node(a) or _is_node(b)):
        return out
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g * vb, va.shape)),
            (b, lambda g: _unbroadcast(g * va, vb.shape)),
        ],
    )


def div(a, b):
    va, vb = value_of(a), value_of(b)
    out = va / vb
    if not (_is_node(a) or _is_node(b)):
        return out
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g / vb, va.shape)),
            (b, lambda g: _unbroadcast(-g * va / (vb * vb), vb.shape)),
        ],
    )


def neg(a):
    va = value_of(a)
    if not _is_node(a):
        return -va
    return _record(-va, [(a, lambda g: -g)])


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim != 2 or vb.ndim != 2:
        raise ValueError(
            f"matmul: expected 2-D operands, got {va.shape} @ {vb.shape}"
        )
    if va.shape[1] != vb.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree ({va.shape} @ {vb.shape})"
        )
    out = va @ vb
    if not (_is_node(a) or _is_node(b)):
        return out
    return _record(
        out,
        [
            (a, lambda g: g @ vb.T),
            (b, lambda g: va.T @ g),
        ],
    )


def relu(a):
    va = value_of(a)
    out = np.maximum(va, 0.0)
    if not _is_node(a):
        return out
    # Subgradient at the kink is taken as 0.
    return _record(out, [(a, lambda g: g * (va > 0.0))])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe on both tails
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    """log(1 + exp(x)), overflow-safe (asymptotically x for large x)."""
    va = value_of(a)
    out = np.logaddexp(0.0, va)
    if not _is_node(a):
        return out
    return _record(out, [(a, lambda g: g * _sigmoid(va))])


def log(a):
    va = value_of(a)
    out = np.log(va)
    if not _is_node(a):
        return out
    return _record(out, [(a, lambda g: g / va)])


def exp(a):
    va = value_of(a)
    out = np.exp(va)
    if not _is_node(a):
        return out
    return _record(out, [(a, lambda g: g * out)])


def sqrt(a):
    va = value_of(a)
    out = np.sqrt(va)
    if not _is_node(a):
        return out
    return _record(out, [(a, lambda g: g * 0.5 / out)])


def clamp_min(a, floor: float):
    """Elementwise max(a, floor); gradient is zero where the floor binds."""
    va = value_of(a)
    out = np.maximum(va, floor)
    if not _is_node(a):
        return out
    return _record(out, [(a, lambda g: g * (va > floor))])


# ---------------------------------------------------------------------------
# reductions


def _spread(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).astype(np.float64)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).astype(np.float64)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    va = value_of(a)
    out = va.sum(axis=axis, keepdims=keepdims)
    if not _is_node(a):
        return out
    return _record(out, [(a, lambda g: _spread(g, va.shape, axis, keepdims))])


def mean(a, axis=None, keepdims=False):
    va = value_of(a)
    out = va.mean(axis=axis, keepdims=keepdims)
    if not _is_node(a):
        return out
    if axis is None:
        count = va.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= va.shape[ax]
    return _record(
        out, [(a, lambda g: _spread(g, va.shape, axis, keepdims) / count)]
    )


# ---------------------------------------------------------------------------
# deterministic RNG


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Stable 64-bit child seed for substreams and sweep grid points."""
    return _splitmix64((int(base_seed) & _MASK64) ^ _splitmix64(index & _MASK64))


class Rng:
    """Counter-based deterministic generator (Philox 4x64).

    An identical seed yields an identical stream on every run regardless of
    thread count; substreams come from :meth:`spawn` via a splitmix64 hash of
    (seed, index), so consumers cannot perturb each other's draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, index: int) -> "Rng":
        return Rng(derive_seed(self.seed, index))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
