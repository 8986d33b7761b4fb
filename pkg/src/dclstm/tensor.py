"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Node` wraps a value array and, after :func:`backward`, the gradient
of a scalar loss with respect to that value.  Primitive ops build the graph;
layers that need speed (convolutions, batch norm, LSTM) register fused ops
through :meth:`Node.from_op` with their own backward rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonDeterministicError(RuntimeError):
    pass


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = as_array(value)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = ()
        self.op = op
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, value, parents: Sequence["Node"], backward, op: str) -> "Node":
        """Create a node produced by ``op``.

        ``backward(g)`` receives dLoss/dOut and returns one gradient (or None)
        per parent, each shaped like that parent's value.
        """
        out = cls(value, requires_grad=any(p.requires_grad for p in parents), op=op)
        if out.requires_grad:
            out.parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match value shape {self.value.shape} ({self.op})")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=DTYPE, copy=True), requires_grad=True, op="param")


def constant(value) -> Node:
    return Node(value)


def backward(root: Node) -> None:
    """Accumulate dRoot/dNode into ``grad`` of every reachable node.

    Gradients add into existing ``grad`` arrays; call :func:`zero_grads`
    between independent passes.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    seed = np.ones_like(root.value)
    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _topological(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grads(nodes) -> None:
    for n in nodes:
        n.grad = None


# ---------------------------------------------------------------- broadcasting

def _broadcast_ok(big: tuple, small: tuple) -> bool:
    if small == big:
        return True
    if int(np.prod(small, dtype=np.int64)) == 1 and len(small) <= 1:
        return True
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _result_shape(a: Node, b: Node, op: str) -> tuple:
    sa, sb = a.shape, b.shape
    if _broadcast_ok(sa, sb):
        return sa
    if _broadcast_ok(sb, sa):
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape, dtype=np.int64)) == 1 and len(shape) <= 1:
        return np.reshape(g.sum(), shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    _result_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Node.from_op(a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Node, b: Node) -> Node:
    _result_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Node.from_op(a.value - b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Node, b: Node) -> Node:
    _result_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Node.from_op(av * bv, (a, b),
                        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def neg(a: Node) -> Node:
    return Node.from_op(-a.value, (a,), lambda g: (-g,), "neg")


def square(a: Node) -> Node:
    av = a.value
    return Node.from_op(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node.from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return Node.from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node.from_op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def activate(a: Node, kind: str) -> Node:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "linear":
        return a
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` where ``b`` is a matrix and ``a`` has any number of leading axes."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def back(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Node.from_op(av @ bv, (a, b), back, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    old = a.shape
    return Node.from_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Node, axis1: int = -2, axis2: int = -1) -> Node:
    """Swap two axes."""
    nd = a.value.ndim
    if not (-nd <= axis1 < nd and -nd <= axis2 < nd):
        raise ShapeError(f"transpose: axes ({axis1}, {axis2}) out of range for shape {a.shape}")
    return Node.from_op(np.ascontiguousarray(np.swapaxes(a.value, axis1, axis2)), (a,),
                        lambda g: (np.swapaxes(g, axis1, axis2),), "transpose")


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    shapes = [n.shape for n in nodes]
    nd = len(shapes[0])
    ax = axis % nd
    for s in shapes[1:]:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {shapes[0]} and {s} along axis {axis}")
    bounds = np.cumsum([0] + [s[ax] for s in shapes])

    def back(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(nodes))]

    return Node.from_op(np.concatenate([n.value for n in nodes], axis=ax), nodes, back, "concat")


def slice_(a: Node, axis: int, start: int, stop: int) -> Node:
    ax = axis % a.value.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] invalid for axis {axis} of shape {a.shape}")
    idx = [slice(None)] * a.value.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return Node.from_op(a.value[idx].copy(), (a,), back, "slice")


def broadcast(a: Node, shape) -> Node:
    shape = tuple(shape)
    if not _broadcast_ok(shape, a.shape):
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    old = a.shape
    return Node.from_op(np.broadcast_to(a.value, shape).copy(), (a,),
                        lambda g: (_unbroadcast(g, old).reshape(old),), "broadcast")


# ---------------------------------------------------------------- reductions

def sum_(a: Node, axis=None) -> Node:
    shape = a.shape
    if axis is None:
        return Node.from_op(np.asarray(a.value.sum()), (a,),
                            lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = a.value.sum(axis=axis)
    return Node.from_op(out, (a,),
                        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(a: Node, axis=None) -> Node:
    shape = a.shape
    if axis is None:
        n = a.size
        return Node.from_op(np.asarray(a.value.mean()), (a,),
                            lambda g: (np.full(shape, float(g) / n),), "mean")
    n = shape[axis]
    return Node.from_op(a.value.mean(axis=axis), (a,),
                        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape) / n,), "mean")


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter: list[float] = field(default_factory=list)
    tolerance: float = 1e-4
    passed: bool = False

    def __bool__(self) -> bool:
        return self.passed


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a)
    n = np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[[], Node], params: Sequence[Node], epsilon: float = 1e-5,
               tolerance: float = 1e-4, max_elements: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` closes over ``params`` and rebuilds the graph on every call.  With
    ``max_elements`` only that many coordinates per parameter are probed,
    chosen by ``rng``.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    zero_grads(params)
    loss = f()
    again = f()
    if float(loss.value) != float(again.value):
        raise NonDeterministicError(f"f() returned {float(loss.value)!r} then {float(again.value)!r}")
    backward(loss)
    rng = rng or np.random.default_rng(0)
    errors = []
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f().value)
            flat[i] = orig - epsilon
            fm = float(f().value)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
        errors.append(worst)
    zero_grads(params)
    worst = max(errors, default=0.0)
    return GradCheckReport(worst, errors, tolerance, worst <= tolerance)
