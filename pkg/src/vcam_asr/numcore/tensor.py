"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy buffer. Operations executed while a
:class:`Tape` is active append a record (output, inputs, backward closure) to
that tape; :func:`backward` walks the records in reverse and accumulates
gradients into every leaf tensor with ``requires_grad=True``.

Outside of an active tape nothing is recorded, which is what inference uses.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A forward operation produced or received NaN/Inf."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


_state = threading.local()


def _dtype_stack() -> list:
    if not hasattr(_state, "dtypes"):
        _state.dtypes = [np.float32]
    return _state.dtypes


def default_dtype():
    return _dtype_stack()[-1]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width (32 or 64)."""
    if bits not in (32, 64):
        raise ValueError(f"unsupported precision: {bits}")
    stack = _dtype_stack()
    stack.append(np.float32 if bits == 32 else np.float64)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations whose inputs need gradients are
    recorded while the tape is active. Records are appended in execution
    order, so the list is already topologically sorted.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording (e.g. for evaluation inside a training loop)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs a gradient.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if needs:
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            else:
                ig = np.asarray(ig, dtype=inp.data.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = ig.copy()
                else:
                    inp.grad += ig
