"""Reverse-mode automatic differentiation on a flat tape of numpy values.

Every recorded node caches its forward value, so building an expression is
also evaluating it. Operands that are not :class:`Var` are constants and get
no gradient. The module-level functions (``exp``, ``log``, ...) fall back to
plain numpy when none of their operands lives on a tape, which lets the same
rendering and loss code run forward-only at numpy speed.

Values are float64 arrays; binary operations follow numpy broadcasting and
gradients are summed back to each operand's shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

DIV_GUARD = 1e-12

OP_KINDS = (
    "leaf", "add", "sub", "mul", "div", "exp", "log", "neg", "abs", "max",
    "sigmoid", "softplus", "sqrt", "dot", "sum", "index", "concat",
    "reshape", "cumsum",
)


class GradError(ValueError):
    pass


@dataclass
class Node:
    kind: str
    parents: tuple[int | None, ...]
    inputs: tuple[np.ndarray, ...]
    value: np.ndarray
    params: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Append-only record of primitive operations.

    Operands always precede their consumers, so append order is a valid
    topological order and :func:`backward` is a single reverse sweep.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        v = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), (), v))
        return Var(self, len(self.nodes) - 1, v)

    def record(self, kind: str, *operands, **params) -> "Var":
        if kind not in _FORWARD:
            raise GradError(f"unknown op kind {kind!r}")
        parents = []
        inputs = []
        for op in operands:
            if isinstance(op, Var):
                if op.tape is not self:
                    raise GradError("operand belongs to a different tape")
                parents.append(op.node)
                inputs.append(op.value)
            else:
                parents.append(None)
                inputs.append(np.asarray(op, dtype=np.float64))
        value = _FORWARD[kind](*inputs, **params)
        self.nodes.append(Node(kind, tuple(parents), tuple(inputs), value, params))
        return Var(self, len(self.nodes) - 1, value)


class Var:
    """A value recorded on a tape; ``node`` indexes into ``tape.nodes``."""

    __slots__ = ("tape", "node", "value")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: Tape, node: int, value: np.ndarray) -> None:
        self.tape = tape
        self.node = node
        self.value = value

    def __repr__(self) -> str:
        return f"Var(node={self.node}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return dot(self, o)

    def __rmatmul__(self, o):
        return dot(o, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(operands) -> Tape | None:
    for op in operands:
        if isinstance(op, Var):
            return op.tape
    return None


def _apply(kind: str, *operands, **params):
    tape = _tape_of(operands)
    if tape is None:
        return _FORWARD[kind](*(np.asarray(o, dtype=np.float64) for o in operands), **params)
    return tape.record(kind, *operands, **params)


# forward rules


def _div_fwd(a, b):
    if np.any(np.abs(b) < DIV_GUARD):
        raise GradError("division guard: |denominator| below 1e-12")
    return a / b


def _log_fwd(a):
    if np.any(a <= 0):
        raise GradError("log domain: non-positive input")
    return np.log(a)


def _sqrt_fwd(a):
    if np.any(a < 0):
        raise GradError("sqrt domain: negative input")
    return np.sqrt(a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _index_fwd(a, key=None):
    return np.array(a[key], dtype=np.float64)


def _concat_fwd(*arrays, axis=-1):
    return np.concatenate(arrays, axis=axis)


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": _div_fwd,
    "exp": np.exp,
    "log": _log_fwd,
    "neg": np.negative,
    "abs": np.abs,
    "max": np.maximum,
    "sigmoid": _sigmoid,
    "softplus": lambda a: np.logaddexp(0.0, a),
    "sqrt": _sqrt_fwd,
    "dot": np.matmul,
    "sum": lambda a, axis=None: np.sum(a, axis=axis),
    "index": _index_fwd,
    "concat": _concat_fwd,
    "reshape": lambda a, shape=(): np.reshape(a, shape),
    "cumsum": lambda a, axis=-1: np.cumsum(a, axis=axis),
}


# vector-Jacobian products: (upstream grad, node) -> one grad per operand


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _need(n, k: int) -> bool:
    # constant operands (no parent node) get no gradient
    return n.parents[k] is not None


def _vjp_add(g, n):
    a, b = n.inputs
    return (_unbroadcast(g, a.shape) if _need(n, 0) else None,
            _unbroadcast(g, b.shape) if _need(n, 1) else None)


def _vjp_sub(g, n):
    a, b = n.inputs
    return (_unbroadcast(g, a.shape) if _need(n, 0) else None,
            _unbroadcast(-g, b.shape) if _need(n, 1) else None)


def _vjp_mul(g, n):
    a, b = n.inputs
    return (_unbroadcast(g * b, a.shape) if _need(n, 0) else None,
            _unbroadcast(g * a, b.shape) if _need(n, 1) else None)


def _vjp_div(g, n):
    a, b = n.inputs
    return (_unbroadcast(g / b, a.shape) if _need(n, 0) else None,
            _unbroadcast(-g * a / (b * b), b.shape) if _need(n, 1) else None)


def _vjp_max(g, n):
    a, b = n.inputs
    # ties go to the second operand, so relu(x) = max(x, 0) has slope 0 at 0
    take_a = a > b
    return (_unbroadcast(np.where(take_a, g, 0.0), a.shape) if _need(n, 0) else None,
            _unbroadcast(np.where(take_a, 0.0, g), b.shape) if _need(n, 1) else None)


def _vjp_dot(g, n):
    a, b = n.inputs
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if b.ndim == 1:
        return np.multiply.outer(g, b), np.tensordot(g, a, axes=(range(g.ndim), range(g.ndim)))
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if _need(n, 0) else None
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if _need(n, 1) else None
    return ga, gb


def _vjp_sum(g, n):
    (a,) = n.inputs
    axis = n.params.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _vjp_index(g, n):
    (a,) = n.inputs
    out = np.zeros_like(a)
    np.add.at(out, n.params["key"], g)
    return (out,)


def _vjp_concat(g, n):
    axis = n.params.get("axis", -1)
    sizes = [x.shape[axis] for x in n.inputs]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _vjp_cumsum(g, n):
    axis = n.params.get("axis", -1)
    return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)


_VJP: dict[str, Callable[[np.ndarray, Node], tuple]] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "exp": lambda g, n: (g * n.value,),
    "log": lambda g, n: (g / n.inputs[0],),
    "neg": lambda g, n: (-g,),
    "abs": lambda g, n: (g * np.sign(n.inputs[0]),),
    "max": _vjp_max,
    "sigmoid": lambda g, n: (g * n.value * (1.0 - n.value),),
    "softplus": lambda g, n: (g * _sigmoid(n.inputs[0]),),
    "sqrt": lambda g, n: (g * 0.5 / np.where(n.value > 0, n.value, np.inf),),
    "dot": _vjp_dot,
    "sum": _vjp_sum,
    "index": _vjp_index,
    "concat": _vjp_concat,
    "reshape": lambda g, n: (g.reshape(n.inputs[0].shape),),
    "cumsum": _vjp_cumsum,
}


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Gradients of ``output`` (summed if non-scalar) w.r.t. every node it reaches.

    Nodes that do not influence ``output`` are absent from the map; use
    :func:`grad_of` to read them back as zeros.
    """
    if not isinstance(output, Var) or output.tape is not tape or output.node >= len(tape.nodes):
        raise GradError("output is not on this tape")
    grads: dict[int, np.ndarray] = {output.node: np.ones_like(output.value)}
    for i in range(output.node, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.kind == "leaf":
            continue
        for parent, pg in zip(node.parents, _VJP[node.kind](g, node)):
            if parent is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return grads


def grad_of(grads: dict[int, np.ndarray], var: Var) -> np.ndarray:
    g = grads.get(var.node)
    return np.zeros_like(var.value) if g is None else g


# functional API; each works on Vars and plain arrays alike


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def neg(a):
    return _apply("neg", a)


def abs_(a):
    return _apply("abs", a)


def maximum(a, b):
    return _apply("max", a, b)


def relu(a):
    return _apply("max", a, 0.0)


def sigmoid(a):
    return _apply("sigmoid", a)


def softplus(a):
    return _apply("softplus", a)


def sqrt(a):
    return _apply("sqrt", a)


def dot(a, b):
    return _apply("dot", a, b)


def sum_(a, axis=None):
    return _apply("sum", a, axis=axis)


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def square(a):
    return mul(a, a)


def index(a, key):
    return _apply("index", a, key=key)


def concat(arrays, axis=-1):
    return _apply("concat", *arrays, axis=axis)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def cumsum(a, axis=-1):
    return _apply("cumsum", a, axis=axis)


# verification helpers


def gradient(f: Callable, x) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at parameter vector ``x``."""
    tape = Tape()
    xv = tape.leaf(x)
    out = f(xv)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(xv.value)
    if out.value.size != 1:
        raise GradError("gradient() needs a scalar output")
    if not np.isfinite(out.value).all():
        raise GradError("non-finite forward value")
    return float(out.value), grad_of(backward(tape, out), xv)


def finite_difference(f: Callable, x, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f``, evaluated without a tape."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(value_of(f(x)))
        flat[i] = orig - h
        fm = float(value_of(f(x)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradError(f"non-finite forward value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def relative_errors(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))


def grad_check(f: Callable, x, h: float = 1e-4) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    _, g_ad = gradient(f, x)
    g_fd = finite_difference(f, x, h)
    return float(relative_errors(g_ad, g_fd).max(initial=0.0))
