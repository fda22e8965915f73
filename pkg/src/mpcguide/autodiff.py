"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs are being watched.
:func:`backward` replays the tape in reverse and returns vector-Jacobian
products for the requested leaves.

    >>> with Tape() as tape:
    ...     x = tape.watch([1.0, 2.0])
    ...     y = (x * x).sum()
    >>> backward(y, [x])[0]
    array([2., 4.])

Tensors created outside an active tape, or produced by :func:`stop_gradient`,
are constants and never receive gradients.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "stop_gradient",
    "concat",
    "logsumexp",
    "norm",
    "silu",
    "tanh",
    "exp",
    "log",
    "square",
]

_local = threading.local()


def _active_tapes() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _active_tapes()
    return stack[-1] if stack else None


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    One tape per computation; tapes do not nest into each other's graphs and
    are not shared across threads.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False
    _next_id: int = 0

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes().remove(self)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def watch(self, value) -> "Tensor":
        """Return a leaf tensor whose gradient can be requested."""
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        data = value.data if isinstance(value, Tensor) else value
        return Tensor(np.array(data, dtype=np.float64), tape=self, tid=self._new_id())

    def record(self, op: str, inputs: Sequence["Tensor"], data: np.ndarray, vjp) -> "Tensor":
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        out = Tensor(data, tape=self, tid=self._new_id())
        ids = tuple(t.tid if t.tape is self else 0 for t in inputs)
        self.nodes.append(Node(op, ids, out.tid, vjp))
        return out

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Dense float64 array, optionally linked into a gradient tape."""

    __slots__ = ("data", "tape", "tid")
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None, tid: int = 0):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.tid = tid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def taped(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", taped" if self.taped else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    # arithmetic
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("cannot mix tensors from different tapes")
    return tape


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 or a.ndim > 2:
        raise ValueError(f"matmul: only 1-D/2-D operands supported, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _emit("silu", (a,), ad * sig, lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


def broadcast(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    sa = a.shape
    return _emit("broadcast", (a,), out, lambda g: (_unbroadcast(g, sa),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(sa),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    sa = a.shape

    def vjp(g):
        out = np.zeros(sa)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("getitem", (a,), a.data[idx], vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    s = np.log(np.exp(ad - m).sum(axis=axis, keepdims=True)) + m
    soft = np.exp(ad - s)
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _emit("logsumexp", (a,), out, vjp)


def norm(a, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm; the gradient at an exact zero is taken to be zero."""
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        n = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            n = np.expand_dims(n, axis)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(n > 0, ad / n, 0.0)
        return (g * r,)

    return _emit("norm", (a,), out, vjp)


def stop_gradient(x) -> Tensor:
    """Value-identical constant copy of ``x``, detached from any tape."""
    return Tensor(np.array(as_tensor(x).data))


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that ``output`` does not depend on get a zero gradient. The tape
    is consumed: further recording or a second backward pass raises.
    """
    if output.data.size != 1:
        raise ValueError(f"backward: output must be a scalar, got shape {output.shape}")
    tape = output.tape
    if tape is None:
        for w in wrt:
            if w.tape is None:
                raise ValueError("backward: wrt tensor is not on a tape")
        return [np.zeros(w.shape) for w in wrt]
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward()")
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("backward: wrt tensor is not on the output's tape")

    keep = {w.tid for w in wrt}
    grads: dict[int, np.ndarray] = {output.tid: np.ones(output.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output) if node.output in keep else grads.pop(node.output, None)
        if g is None:
            continue
        for tid, gi in zip(node.inputs, node.vjp(g)):
            if tid == 0 or gi is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    tape.consumed = True
    tape.nodes.clear()
    return [np.array(grads.get(w.tid, np.zeros(w.shape)), dtype=np.float64).reshape(w.shape) for w in wrt]
