"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape, ops are plain numpy
calls with no bookkeeping, which is what inference uses.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes disagree; the message names the axis."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "name")
    # make `ndarray op Tensor` dispatch to the Tensor's reflected method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic; enough to express moment formulas on tensors and floats alike
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

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are appended in execution
    order, which is a valid topological order by construction.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
    """Wrap ``out_data`` and put the op on the active tape if it needs grads."""
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if tape is not None and needs:
        tape.record(Node(name, tuple(inputs), out, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep over ``tape``; returns ``{tensor_id: grad}`` for leaves.

    Leaf tensors (requires_grad, not produced on this tape) also get their
    ``grad`` field set. Contributions from several consumers are summed.
    """
    if loss.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if t.id not in produced:
                leaves[t.id] = t
    out = {}
    for tid, t in leaves.items():
        g = grads[tid].reshape(t.shape)
        t.grad = g
        out[tid] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return record("div", (a, b), out, bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", (a,), np.array(a.data[index]), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (a,), out, bwd)
