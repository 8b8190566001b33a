"""Dense tensors with a recorded tape for reverse-mode differentiation.

Every differentiable operation creates a :class:`Node` stamped with a
monotonically increasing sequence number.  The sequence number is the tape
position: :func:`backward` gathers the nodes reachable from the loss and
replays them in exactly the reverse of their execution order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_SEQUENCE = itertools.count()

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class Node:
    """One executed differentiable operation on the tape."""

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_SEQUENCE)
        self.op = op
        self.inputs = tuple(inputs)
        # backward_fn(grad_out) -> tuple of grads (or None) aligned with inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """N-dimensional real array, canonically laid out as (batch, channels, height, width)."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the implementations live in densefpn.ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        from . import ops

        return ops.sum_all(self)


class Parameter(Tensor):
    """A named, trainable tensor.  Its shape is fixed at creation."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(
                f"parameter {self.name!r} has shape {self.data.shape}, got {values.shape}"
            )
        self.data = np.ascontiguousarray(values)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


_state = threading.local()


@contextmanager
def no_grad():
    """Run ops without recording them (per thread)."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it on the tape if any input needs a gradient."""
    out = Tensor(data)
    if not getattr(_state, "disabled", False) and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def tape_of(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss`` in execution (topological) order."""
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or node.seq in seen:
            continue
        seen[node.seq] = node
        stack.extend(node.inputs)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires it.

    Gradients add onto existing ``.grad`` buffers, so calling this twice without
    zeroing doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        # loss is itself a leaf
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    out_grad: dict[int, np.ndarray] = {loss.node.seq: np.ones_like(loss.data)}
    for node in reversed(tape_of(loss)):
        g = out_grad.pop(node.seq, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                prev = out_grad.get(t.node.seq)
                out_grad[t.node.seq] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype)
                if t.grad is None:
                    t.grad = gi.copy()
                else:
                    t.grad += gi


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
