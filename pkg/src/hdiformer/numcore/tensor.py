"""Dense tensors, the recording tape and reverse-mode backward."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeError, StateError

_DTYPES = {32: np.float32, 64: np.float64}
_precision = {"bits": 32}

_tape_stack: list["Tape"] = []
_scope_stack: list[str] = []
_grad_hooks: list[Callable] = []


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit reals for every tensor created afterwards."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision["bits"] = bits


def get_precision() -> int:
    return _precision["bits"]


def get_dtype():
    return _DTYPES[_precision["bits"]]


@contextlib.contextmanager
def precision(bits: int):
    old = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def scope(name: str):
    """Tag every node recorded inside the block with a dotted scope name."""
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


def current_scope() -> str:
    return ".".join(_scope_stack)


class Tensor:
    """Row-major real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (implemented in ops) ----------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass(frozen=True)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    scope: str = ""


@dataclass
class Tape:
    """Append-only log of primitive applications, in execution order.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients are appended. Outside any tape nothing is recorded.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def ops(self, prefix: str = "") -> list:
        return [n.op for n in self.nodes if n.scope.startswith(prefix)]

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_record():
    """Temporarily suspend recording (inference / optimizer updates)."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def record(op: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any input needs a gradient.

    ``backward(g)`` maps the output gradient to a tuple with one entry per
    input (``None`` where no gradient is defined).
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, backward, current_scope()))
    return out


@contextlib.contextmanager
def grad_hook(fn: Callable):
    """Install ``fn(node, grads) -> grads`` on every node visited by backward.

    Used by the gradient-check harness to prove a corrupted backward is
    caught.
    """
    _grad_hooks.append(fn)
    try:
        yield
    finally:
        _grad_hooks.remove(fn)


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` of every leaf on ``tape`` with dLoss/dLeaf.

    Grads are overwritten, not accumulated, so replaying the same tape
    gives identical results. Leaves that requires_grad but do not reach the
    loss (and anything listed in ``wrt``) receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise StateError("loss is not reachable from the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for hook in _grad_hooks:
            in_grads = hook(node, in_grads)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for t in wrt:
        leaves.setdefault(id(t), t)
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
