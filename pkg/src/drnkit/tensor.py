"""Dense float tensors and a reverse-mode autodiff tape.

A ``Tensor`` wraps a row-major numpy array of rank 0..4 (semantic order
batch x channels x height x width for rank 4). Operations in
:mod:`drnkit.ops` record entries on the active :class:`Tape`;
:func:`backward` replays the entries in reverse, accumulating gradients
into every leaf tensor that requires them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

# When enabled, every primitive validates that its output is finite.
# Tests and gradient checks turn this on; the inner training loop leaves it
# off and relies on the optimizer's per-step gradient validation instead.
FINITE_CHECKS = False

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are inconsistent for an operation."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (non-scalar loss, reused tape, ...)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf values."""


class Tensor:
    """Rank-0..4 dense float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float32 is the working precision; float64 must be asked for,
        # either with an explicit dtype or a float64 ndarray
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeMismatchError(f"tensor rank {arr.ndim} exceeds 4: {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class Parameter:
    """Named trainable tensor; ``grad`` accumulates across backward passes."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: Tensor):
        value.requires_grad = True
        if value.grad is None:
            value.grad = np.zeros_like(value.data)
        self.name = name
        self.value = value

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# Backward rule contract: rule(saved, grad_out) returns one gradient array
# (or None) per recorded input. grad_out must be treated as read-only and
# returned arrays must be freshly allocated, never views of grad_out.
BackwardRule = Callable[[tuple, np.ndarray], tuple]


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: tuple
    rule: BackwardRule


class Tape:
    """Ordered operation records; inputs always precede their consumers."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None


def record(
    kind: str,
    inputs: Sequence[Tensor],
    output: Tensor,
    saved: tuple,
    rule: BackwardRule,
) -> Tensor:
    """Attach a tape entry for ``output`` if a tape is active and needed."""
    if FINITE_CHECKS and not np.all(np.isfinite(output.data)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    tape = Tape.current()
    if tape is None or not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    tape.entries.append(TapeEntry(kind, tuple(inputs), output, saved, rule))
    return output


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse-topological sweep; grads accumulate (+=) into leaf tensors.

    Each tape is single-use. Running forward+backward twice without zeroing
    parameter gradients doubles them by design.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    tape.consumed = True

    produced = {id(e.output) for e in tape.entries}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g_out = pending.pop(id(entry.output), None)
        if g_out is None:
            continue
        input_grads = entry.rule(entry.saved, g_out)
        for t, g in zip(entry.inputs, input_grads):
            if g is None:
                continue
            if id(t) in produced:
                acc = pending.get(id(t))
                # never add in place: g may alias an array pending elsewhere
                pending[id(t)] = g if acc is None else acc + g
            elif t.requires_grad:
                if FINITE_CHECKS and not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"{entry.kind} backward produced non-finite grad")
                t.accumulate_grad(g)
