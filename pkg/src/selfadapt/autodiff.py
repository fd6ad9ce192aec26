"""Reverse-mode automatic differentiation on dense float64 arrays.

Forward values are computed eagerly; every operation whose inputs require
gradients is appended to the active :class:`Tape`.  Adjoint rules are written
in terms of recorded operations themselves, so running a backward pass while
the tape is active (``GradMode.SECOND_ORDER``) records the backward graph and
the returned gradients can be differentiated again.

Usage::

    with Tape() as tape:
        x = Tensor(3.0, requires_grad=True)
        y = x * x * x
        (dy,) = grad(y, [x], GradMode.SECOND_ORDER)
        (d2y,) = grad(dy, [x])
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "GradMode",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_diff",
    "grad",
    "no_record",
    "record",
    "OP_KINDS",
    "broadcast_to",
    "clip",
    "conv1x1",
    "exp",
    "log",
    "matmul",
    "relu",
    "sigmoid",
    "sqrt",
    "sum_to",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GradMode(enum.Enum):
    FIRST_ORDER = "first"
    SECOND_ORDER = "second"

    @classmethod
    def parse(cls, value: "GradMode | str") -> "GradMode":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("-", "_")
        if v in ("first", "first_order", "firstorder"):
            return cls.FIRST_ORDER
        if v in ("second", "second_order", "secondorder"):
            return cls.SECOND_ORDER
        raise ValueError(f"unknown grad mode {value!r}")


_state = threading.local()


def _stack() -> list:
    s = getattr(_state, "stack", None)
    if s is None:
        s = _state.stack = []
    return s


def _active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class _Recording:
    def __init__(self, tape: "Tape | None"):
        self.tape = tape

    def __enter__(self):
        _stack().append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _stack().pop()
        return False


def no_record() -> _Recording:
    """Context in which operations are evaluated without being recorded."""
    return _Recording(None)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    attrs: dict
    index: int
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, kind: str, inputs: tuple, out: "Tensor", attrs: dict) -> None:
        node = Node(kind, inputs, out, attrs, len(self.nodes), self)
        self.nodes.append(node)
        out.node = node

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the leaf values alone."""
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            v = _OPS[node.kind].forward(*args, **node.attrs)
            values[id(node.output)] = v
            out.append(v)
        return out


class Tensor:
    """An n-dimensional float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape(self) -> Tape | None:
        return self.node.tape if self.node is not None else None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; every method routes through record()
    def __add__(self, o): return record("add", [self, o])
    def __radd__(self, o): return record("add", [o, self])
    def __sub__(self, o): return record("sub", [self, o])
    def __rsub__(self, o): return record("sub", [o, self])
    def __mul__(self, o): return record("mul", [self, o])
    def __rmul__(self, o): return record("mul", [o, self])
    def __truediv__(self, o): return record("div", [self, o])
    def __rtruediv__(self, o): return record("div", [o, self])
    def __neg__(self): return record("neg", [self])
    def __matmul__(self, o): return record("matmul", [self, o])
    def __getitem__(self, key): return record("slice", [self], key=_norm_key(key))

    def sum(self, axis=None, keepdims=False):
        return record("sum", [self], axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("mean", [self], axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        shape = tuple(int(s) for s in shape)
        if -1 in shape:
            known = int(np.prod([s for s in shape if s != -1]))
            shape = tuple(self.size // known if s == -1 else s for s in shape)
        return record("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return record("transpose", [self], axes=tuple(int(a) for a in axes))

    @property
    def T(self):
        return self.transpose()


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _norm_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice)):
            raise TypeError("only basic int/slice indexing is supported")
    return key


# ---------------------------------------------------------------------------
# operation table


@dataclass(frozen=True)
class _Op:
    forward: Callable[..., np.ndarray]
    check: Callable[..., None]
    vjp: Callable[..., tuple]


def _no_check(*shapes, **attrs):
    pass


def _check_broadcast(kind):
    def check(a, b, **_):
        try:
            np.broadcast_shapes(a, b)
        except ValueError:
            raise ShapeError(f"{kind}: cannot broadcast shapes {a} and {b}") from None
    return check


def _check_matmul(a, b, **_):
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"matmul: incompatible shapes {a} and {b}")


def _check_conv(w, x, **_):
    if len(w) != 2 or len(x) < 1 or x[-1] != w[1]:
        raise ShapeError(f"conv1x1: weight {w} does not map channels of input {x}")


def _check_reshape(a, shape, **_):
    if int(np.prod(a)) != int(np.prod(shape)):
        raise ShapeError(f"reshape: cannot reshape {a} into {shape}")


def _check_transpose(a, axes, **_):
    if sorted(axes) != list(range(len(a))):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a}")


def _check_sum_to(a, shape, **_):
    try:
        if np.broadcast_shapes(a, shape) != tuple(a):
            raise ValueError
    except ValueError:
        raise ShapeError(f"sum_to: cannot reduce {a} to {shape}") from None


def _check_broadcast_to(a, shape, **_):
    try:
        if np.broadcast_shapes(a, shape) != tuple(shape):
            raise ValueError
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a} to {shape}") from None


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return g.sum(axis=axes, keepdims=True).reshape(shape) if axes else g.reshape(shape)


def _scatter(g: np.ndarray, key, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[key] = g
    return out


def _reduced_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    return tuple(1 if i in axis else s for i, s in enumerate(shape))


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return int(np.prod([shape[i] for i in axis]))


# vjp signature: (g, inputs, out, **attrs) -> tuple of input gradients (Tensor | None)
def _vjp_add(g, ins, out):
    return sum_to(g, ins[0].shape), sum_to(g, ins[1].shape)


def _vjp_sub(g, ins, out):
    return sum_to(g, ins[0].shape), sum_to(-g, ins[1].shape)


def _vjp_mul(g, ins, out):
    a, b = ins
    return sum_to(g * b, a.shape), sum_to(g * a, b.shape)


def _vjp_div(g, ins, out):
    a, b = ins
    return sum_to(g / b, a.shape), sum_to(-(g * out) / b, b.shape)


def _vjp_matmul(g, ins, out):
    a, b = ins
    return g @ b.T, a.T @ g


def _vjp_relu(g, ins, out):
    return (g * Tensor(ins[0].data > 0),)


def _vjp_sigmoid(g, ins, out):
    return (g * (out * (1.0 - out)),)


def _vjp_log(g, ins, out):
    return (g / ins[0],)


def _vjp_exp(g, ins, out):
    return (g * out,)


def _vjp_sqrt(g, ins, out):
    return (g / (2.0 * out),)


def _vjp_neg(g, ins, out):
    return (-g,)


def _vjp_clip(g, ins, out, lo, hi):
    x = ins[0].data
    return (g * Tensor((x >= lo) & (x <= hi)),)


def _vjp_sum(g, ins, out, axis, keepdims):
    shape = ins[0].shape
    return (broadcast_to(g.reshape(_reduced_shape(shape, axis)), shape),)


def _vjp_mean(g, ins, out, axis, keepdims):
    shape = ins[0].shape
    scaled = g * (1.0 / _count(shape, axis))
    return (broadcast_to(scaled.reshape(_reduced_shape(shape, axis)), shape),)


def _vjp_reshape(g, ins, out, shape):
    return (g.reshape(ins[0].shape),)


def _vjp_transpose(g, ins, out, axes):
    return (g.transpose(tuple(np.argsort(axes))),)


def _vjp_conv(g, ins, out):
    w, x = ins
    cout, cin = w.shape
    gw = g.reshape(-1, cout).T @ x.reshape(-1, cin)
    gx = conv1x1(w.T, g)
    return gw, gx


def _vjp_slice(g, ins, out, key):
    return (record("scatter", [g], key=key, shape=ins[0].shape),)


def _vjp_scatter(g, ins, out, key, shape):
    return (g[key],)


def _vjp_sum_to(g, ins, out, shape):
    return (broadcast_to(g, ins[0].shape),)


def _vjp_broadcast_to(g, ins, out, shape):
    return (sum_to(g, ins[0].shape),)


_OPS: dict[str, _Op] = {
    "add": _Op(np.add, _check_broadcast("add"), _vjp_add),
    "sub": _Op(np.subtract, _check_broadcast("sub"), _vjp_sub),
    "mul": _Op(np.multiply, _check_broadcast("mul"), _vjp_mul),
    "div": _Op(np.divide, _check_broadcast("div"), _vjp_div),
    "matmul": _Op(np.matmul, _check_matmul, _vjp_matmul),
    "relu": _Op(lambda x: np.maximum(x, 0.0), _no_check, _vjp_relu),
    "sigmoid": _Op(lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)), _no_check, _vjp_sigmoid),
    "log": _Op(np.log, _no_check, _vjp_log),
    "exp": _Op(np.exp, _no_check, _vjp_exp),
    "sqrt": _Op(np.sqrt, _no_check, _vjp_sqrt),
    "neg": _Op(np.negative, _no_check, _vjp_neg),
    "clip": _Op(lambda x, lo, hi: np.clip(x, lo, hi), _no_check, _vjp_clip),
    "sum": _Op(lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
               _no_check, _vjp_sum),
    "mean": _Op(lambda x, axis, keepdims: np.mean(x, axis=axis, keepdims=keepdims),
                _no_check, _vjp_mean),
    "reshape": _Op(lambda x, shape: np.reshape(x, shape), _check_reshape, _vjp_reshape),
    "transpose": _Op(lambda x, axes: np.transpose(x, axes), _check_transpose, _vjp_transpose),
    "conv1x1": _Op(lambda w, x: x @ w.T, _check_conv, _vjp_conv),
    "slice": _Op(lambda x, key: x[key], _no_check, _vjp_slice),
    "scatter": _Op(_scatter, _no_check, _vjp_scatter),
    "sum_to": _Op(_sum_to, _check_sum_to, _vjp_sum_to),
    "broadcast_to": _Op(lambda x, shape: np.broadcast_to(x, shape).copy(),
                        _check_broadcast_to, _vjp_broadcast_to),
}

OP_KINDS = frozenset(_OPS)


def record(kind: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """Evaluate ``kind`` on ``inputs`` and append it to the active tape."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unsupported op kind {kind!r}") from None
    ins = tuple(as_tensor(t) for t in inputs)
    op.check(*(t.shape for t in ins), **attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(op.forward(*(t.data for t in ins), **attrs), dtype=np.float64)
    out.node = None
    out.name = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in ins):
        out.requires_grad = True
        tape._append(kind, ins, out, attrs)
    return out


# public functional forms used by the model code
def matmul(a, b): return record("matmul", [a, b])
def relu(x): return record("relu", [x])
def sigmoid(x): return record("sigmoid", [x])
def log(x): return record("log", [x])
def exp(x): return record("exp", [x])
def sqrt(x): return record("sqrt", [x])
def clip(x, lo, hi): return record("clip", [x], lo=float(lo), hi=float(hi))
def conv1x1(w, x): return record("conv1x1", [w, x])


def sum_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return record("sum_to", [x], shape=shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return record("broadcast_to", [x], shape=shape)


# ---------------------------------------------------------------------------
# differentiation


def grad(loss: Tensor, wrt: Sequence[Tensor],
         mode: GradMode | str = GradMode.FIRST_ORDER) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Under ``SECOND_ORDER`` the adjoint computation is recorded on the loss's
    tape, so the results carry their own graph.  Tensors in ``wrt`` that the
    loss does not depend on receive zero gradients.
    """
    mode = GradMode.parse(mode)
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    for w in wrt:
        if not w.requires_grad:
            raise ValueError(f"wrt tensor {w!r} is not recorded (requires_grad=False)")
        if w.node is not None and w.node.tape is not tape:
            raise ValueError(f"wrt tensor {w!r} belongs to a different tape")
    zeros = [Tensor(np.zeros(w.shape)) for w in wrt]
    if tape is None:
        # loss is itself a leaf (or constant)
        return [Tensor(np.ones(w.shape)) if w is loss else z for w, z in zip(wrt, zeros)]

    nodes = tape.nodes[: loss.node.index + 1]
    live = {id(w) for w in wrt}
    for node in nodes:
        for t in node.inputs:
            if id(t) in live:
                live.add(id(node.output))
                break
    if id(loss) not in live:
        return zeros

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
    with _Recording(tape if mode is GradMode.SECOND_ORDER else None):
        for node in reversed(nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            needs = [id(t) in live for t in node.inputs]
            if not any(needs):
                continue
            op = _OPS[node.kind]
            in_grads = op.vjp(g, node.inputs, node.output, **node.attrs)
            for t, gi, need in zip(node.inputs, in_grads, needs):
                if not need or gi is None:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    return [grads.get(id(w), z) for w, z in zip(wrt, zeros)]


backward = grad


def finite_diff(f: Callable[[Tensor], Tensor], at: Tensor | np.ndarray,
                step: float = 1e-5) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``at``."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_record():
        for i in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            out.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return Tensor(out)
