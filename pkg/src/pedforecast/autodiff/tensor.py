"""Dense tensors recorded on a reverse-mode tape.

Every differentiable operation appends a :class:`Node` to the thread-local
:class:`Tape` when at least one input requires a gradient.  :func:`backward`
walks the tape in exact reverse order from the loss node, accumulating
gradients additively for tensors that feed several consumers.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    """Misuse of the tape (non-scalar loss, consumed graph, ...)."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "generation", "index")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.generation = -1
        self.index = -1

    def __repr__(self) -> str:
        return f"Node({self.op}, out={self.output.shape})"


class Tape:
    """Ordered record of executed operations.

    A tape is single-owner.  ``backward`` consumes it; recording resumes on a
    fresh generation so stale graphs cannot be differentiated twice.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, node: Node) -> None:
        node.generation = self.generation
        node.index = len(self.nodes)
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True
        self.check_finite = True
        self.mac_counter: Optional[list] = None


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


@contextmanager
def count_macs() -> Iterator[list]:
    """Accumulate multiply-accumulates of conv/linear ops into ``box[0]``."""
    prev = _state.mac_counter
    box = [0]
    _state.mac_counter = box
    try:
        yield box
    finally:
        _state.mac_counter = prev


def add_macs(n: int) -> None:
    box = _state.mac_counter
    if box is not None:
        box[0] += int(n)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


class Tensor:
    """A dense real array participating in reverse-mode differentiation.

    Shapes follow ``[B, C, T, H, W]`` for video features; lower ranks are fine.
    Integer input is promoted to float64.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.scalar_add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __truediv__(self, other):
        from . import ops
        if not _is_scalar(other):
            raise TypeError("only division by a scalar is supported")
        return ops.scalar_mul(self, 1.0 / other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and put it on the tape if needed.

    ``backward_fn`` receives the output cotangent and returns one gradient
    (or ``None``) per input, each with that input's shape.
    """
    st = _state
    if st.check_finite and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    if st.grad_enabled:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                node = Node(op, tuple(inputs), out, backward_fn)
                st.tape.record(node)
                out._node = node
                break
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every leaf tensor that requires a gradient.

    Leaf gradients accumulate across calls until cleared.  The tape is reset
    afterwards, so calling this twice on the same graph raises.
    """
    tape = tape if tape is not None else _state.tape
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise AutodiffError("loss is not the output of any recorded operation")
    gen = tape.generation
    if (
        node.generation != gen
        or node.index >= len(tape.nodes)
        or tape.nodes[node.index] is not node
    ):
        raise AutodiffError("graph already consumed by backward(); run the forward pass again")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes = tape.nodes
    try:
        for i in range(node.index, -1, -1):
            n = nodes[i]
            g = grads.pop(id(n.output), None)
            if g is None:
                continue
            in_grads = n.backward_fn(g)
            for t, gi in zip(n.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise AutodiffError(
                        f"{n.op}: gradient shape {gi.shape} != input shape {t.data.shape}"
                    )
                tn = t._node
                if tn is None or tn.generation != gen:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    finally:
        tape.reset()
