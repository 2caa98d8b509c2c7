"""Tensor container and the reverse-mode tape.

The engine is deliberately small: numpy arrays wrapped in a ``Tensor``,
ops that record vector-Jacobian callbacks onto an ambient ``Tape``, and a
``backward`` walk in reverse recording order.  Float32 is the production
precision; gradient-check tests switch the default to float64 via
``using_dtype``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from ..errors import GraphError, ShapeError

_DEFAULT_DTYPE = np.float32
_TAPE_STACK: list["Tape"] = []


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported scalar dtype {dtype}")
    _DEFAULT_DTYPE = np.dtype(dtype)


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default scalar precision (e.g. float64 for
    finite-difference checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-d value buffer, optionally carrying a gradient after backward()."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad=requires_grad)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of operations; nodes appear after their inputs' producers."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GraphError("tape context exited out of order")

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._nodes.append(_Node(out, tuple(inputs), vjp))

    def __len__(self) -> int:
        return len(self._nodes)

    def validate(self) -> None:
        """Check topological order: every node's inputs are leaves or outputs
        of earlier nodes."""
        produced: set[int] = set()
        out_ids = {id(node.out) for node in self._nodes}
        for node in self._nodes:
            for inp in node.inputs:
                if id(inp) in out_ids and id(inp) not in produced:
                    raise GraphError("tape input consumed before its producer ran")
            if id(node.out) in produced:
                raise GraphError("tensor produced twice on one tape")
            produced.add(id(node.out))


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
    """Record an op on the ambient tape, if one is active and any input
    participates in differentiation."""
    tape = active_tape()
    if tape is None:
        return
    if any(t.requires_grad or _on_tape(tape, t) for t in inputs):
        tape.record(out, inputs, vjp)


def _on_tape(tape: Tape, t: Tensor) -> bool:
    # A tensor is differentiable-through if some earlier node produced it.
    return any(node.out is t for node in tape._nodes)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor with
    ``requires_grad`` that appears on the tape.

    Parameters untouched by the path to the loss receive zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.validate()
    if not any(node.out is loss for node in tape._nodes):
        raise GraphError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: dict[int, Tensor] = {}
    for node in tape._nodes:
        for inp in node.inputs:
            if inp.requires_grad:
                params[id(inp)] = inp

    for node in reversed(tape._nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.vjp(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None:
                continue
            acc = grads.get(id(inp))
            # out-of-place: vjps may hand the same array to several inputs
            grads[id(inp)] = gin if acc is None else acc + gin

    for tid, t in params.items():
        g = grads.get(tid)
        t.grad = g if g is not None else np.zeros_like(t.data)
