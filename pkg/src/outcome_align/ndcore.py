"""Define-by-run reverse-mode differentiation over float64 arrays.

A :class:`Tape` records every operation as a node holding its cached value.
Node ids are plain integers; inputs always precede the node that consumes
them, so a reverse sweep over ids is a valid topological order.

Example::

    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = tape.square(x)
    tape.backward(y)[x]   # -> array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, shapes, detail: str = ""):
        shape_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


def as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, [a.shape, b.shape], "operands must have identical shapes")


def _fwd_add(vals, attrs):
    a, b = vals
    _same_shape("add", a, b)
    return a + b


def _fwd_subtract(vals, attrs):
    a, b = vals
    _same_shape("subtract", a, b)
    return a - b


def _fwd_multiply(vals, attrs):
    a, b = vals
    _same_shape("multiply", a, b)
    return a * b


def _fwd_divide(vals, attrs):
    a, b = vals
    _same_shape("divide", a, b)
    return a / b


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "expected (n, k) @ (k, m)")
    return a @ b


def _fwd_add_row(vals, attrs):
    a, row = vals
    if a.ndim != 2 or row.shape != (1, a.shape[1]):
        raise ShapeError("add_row", [a.shape, row.shape], "expected (n, k) + (1, k)")
    return a + row


def _sigmoid(x):
    # tanh form is overflow-free and exactly antisymmetric about 0.5
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_concat(vals, attrs):
    if any(v.ndim != 2 for v in vals) or len({v.shape[0] for v in vals}) != 1:
        raise ShapeError("concat", [v.shape for v in vals], "row counts must agree")
    return np.concatenate(vals, axis=1)


def _fwd_log(vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise ValueError("log: input has non-positive entries")
    return np.log(a)


def _fwd_clip(vals, attrs):
    return np.clip(vals[0], attrs["lo"], attrs["hi"])


# vjp(g, input values, output value, attrs) -> gradient per input
def _vjp_add(g, vals, out, attrs):
    return g, g


def _vjp_subtract(g, vals, out, attrs):
    return g, -g


def _vjp_multiply(g, vals, out, attrs):
    a, b = vals
    return g * b, g * a


def _vjp_divide(g, vals, out, attrs):
    a, b = vals
    return g / b, -g * a / (b * b)


def _vjp_matmul(g, vals, out, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _vjp_add_row(g, vals, out, attrs):
    return g, g.sum(axis=0, keepdims=True)


def _vjp_concat(g, vals, out, attrs):
    grads, start = [], 0
    for v in vals:
        width = v.shape[1]
        grads.append(g[:, start:start + width])
        start += width
    return tuple(grads)


def _vjp_clip(g, vals, out, attrs):
    (a,) = vals
    inside = (a >= attrs["lo"]) & (a <= attrs["hi"])
    return (g * inside,)


@dataclass(frozen=True)
class OpKind:
    name: str
    arity: int  # -1 for variadic
    forward: Callable
    vjp: Callable


OPS: dict[str, OpKind] = {}


def _register(name, arity, forward, vjp):
    OPS[name] = OpKind(name, arity, forward, vjp)


_register("add", 2, _fwd_add, _vjp_add)
_register("subtract", 2, _fwd_subtract, _vjp_subtract)
_register("multiply", 2, _fwd_multiply, _vjp_multiply)
_register("divide", 2, _fwd_divide, _vjp_divide)
_register("matmul", 2, _fwd_matmul, _vjp_matmul)
_register("add_row", 2, _fwd_add_row, _vjp_add_row)
_register("sigmoid", 1, lambda v, a: _sigmoid(v[0]),
          lambda g, v, out, a: (g * out * (1.0 - out),))
_register("tanh", 1, lambda v, a: np.tanh(v[0]),
          lambda g, v, out, a: (g * (1.0 - out * out),))
_register("relu", 1, lambda v, a: np.maximum(v[0], 0.0),
          lambda g, v, out, a: (g * (v[0] > 0),))
_register("log", 1, _fwd_log, lambda g, v, out, a: (g / v[0],))
_register("square", 1, lambda v, a: v[0] * v[0],
          lambda g, v, out, a: (2.0 * g * v[0],))
_register("sum", 1, lambda v, a: np.sum(v[0]),
          lambda g, v, out, a: (np.full(v[0].shape, g),))
_register("mean", 1, lambda v, a: np.mean(v[0]),
          lambda g, v, out, a: (np.full(v[0].shape, g / max(v[0].size, 1)),))
_register("scale", 1, lambda v, a: a["factor"] * v[0],
          lambda g, v, out, a: (a["factor"] * g,))
_register("concat", -1, _fwd_concat, _vjp_concat)
_register("clip", 1, _fwd_clip, _vjp_clip)


@dataclass
class Node:
    op: str | None  # None for leaves and constants
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Tape:
    """Computation record for one forward/backward pass.

    ``leaf`` registers a differentiable input (a parameter); ``const``
    registers data that gradients do not flow into.  When ``record`` is
    False the tape keeps values only and refuses ``backward``.
    """

    def __init__(self, record: bool = True, retain: bool = True):
        self.record = record
        self.retain = retain
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self.bindings: dict = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> int:
        nid = self._push(Node(None, (), as_array(value)))
        self.leaves.append(nid)
        return nid

    def const(self, value) -> int:
        return self._push(Node(None, (), as_array(value)))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def forward(self, op: str, *inputs: int, **attrs) -> int:
        try:
            kind = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        if kind.arity >= 0 and len(inputs) != kind.arity:
            raise ValueError(f"{op}: expected {kind.arity} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input node {i} is not on this tape")
        vals = tuple(self.nodes[i].value for i in inputs)
        out = as_array(kind.forward(vals, attrs))
        return self._push(Node(op, tuple(inputs) if self.record else (), out, attrs))

    # convenience wrappers
    def add(self, a, b):
        return self.forward("add", a, b)

    def subtract(self, a, b):
        return self.forward("subtract", a, b)

    def multiply(self, a, b):
        return self.forward("multiply", a, b)

    def divide(self, a, b):
        return self.forward("divide", a, b)

    def matmul(self, a, b):
        return self.forward("matmul", a, b)

    def add_row(self, a, row):
        return self.forward("add_row", a, row)

    def sigmoid(self, a):
        return self.forward("sigmoid", a)

    def tanh(self, a):
        return self.forward("tanh", a)

    def relu(self, a):
        return self.forward("relu", a)

    def log(self, a):
        return self.forward("log", a)

    def square(self, a):
        return self.forward("square", a)

    def sum(self, a):
        return self.forward("sum", a)

    def mean(self, a):
        return self.forward("mean", a)

    def scale(self, a, factor: float):
        return self.forward("scale", a, factor=float(factor))

    def concat(self, *cols):
        return self.forward("concat", *cols)

    def clip(self, a, lo: float, hi: float):
        return self.forward("clip", a, lo=float(lo), hi=float(hi))

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Gradient of the scalar ``root`` with respect to every leaf.

        Only ancestors of ``root`` are visited; leaves that do not feed the
        root receive zeros.
        """
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if self.nodes[root].value.size != 1:
            raise ShapeError("backward", [self.nodes[root].value.shape],
                             "root must be scalar")

        reachable = np.zeros(root + 1, dtype=bool)
        reachable[root] = True
        for nid in range(root, -1, -1):
            if reachable[nid]:
                for i in self.nodes[nid].inputs:
                    reachable[i] = True

        grads: dict[int, np.ndarray] = {root: np.ones_like(self.nodes[root].value)}
        for nid in range(root, -1, -1):
            if not reachable[nid] or nid not in grads:
                continue
            node = self.nodes[nid]
            if node.op is None:
                continue
            g = grads[nid] if self.retain else grads.pop(nid)
            vals = tuple(self.nodes[i].value for i in node.inputs)
            for i, gi in zip(node.inputs, OPS[node.op].vjp(g, vals, node.value, node.attrs)):
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = np.asarray(gi, dtype=np.float64).reshape(self.nodes[i].value.shape)

        return {
            leaf: grads.get(leaf, np.zeros_like(self.nodes[leaf].value))
            for leaf in self.leaves
        }


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite function value at coordinate "
                f"{tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_discrepancy(analytic, numeric, floor: float = 1e-2) -> float:
    """Largest |a - n| / max(|a|, |n|, floor).

    With ``floor=1e-2`` a threshold of 1e-4 means: relative error 1e-4 for
    sizeable entries, absolute error 1e-6 near zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
