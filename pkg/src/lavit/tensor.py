"""Dense float64 tensors, the gradient tape and the FLOPs meter.

A :class:`Tensor` is an immutable wrapper around a float64 numpy array. Operations
in :mod:`lavit.ops` read the active :class:`Tape` (a context variable, so each
thread sees its own) and, when one is active, record a backward closure for every
operation whose inputs are tracked. ``Tape.gradient`` replays the records in
exact reverse execution order.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "FlopsMeter",
    "as_tensor",
    "active_tape",
    "no_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """Immutable row-major float64 array.

    ``requires_grad`` marks a leaf whose gradient a tape should accumulate.
    Results of recorded operations are tracked by the tape that produced them.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; the real work lives in lavit.ops
    def __add__(self, other):
        from lavit import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from lavit import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from lavit import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from lavit import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from lavit import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from lavit import ops

        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class FlopsMeter:
    """Explicit accumulator for operation counts.

    ``flops`` counts multiply-adds as two operations (matmul, convolutions).
    ``nonlinear`` counts softmax, normalization and GELU at the fixed per-element
    costs in :data:`lavit.ops.NONLINEAR_COST`.
    """

    flops: int = 0
    nonlinear: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, flops: int = 0, nonlinear: int = 0) -> None:
        self.flops += int(flops)
        self.nonlinear += int(nonlinear)
        self.by_op[op] = self.by_op.get(op, 0) + int(flops) + int(nonlinear)

    def reset(self) -> None:
        self.flops = 0
        self.nonlinear = 0
        self.by_op.clear()


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("lavit_tape", default=None)


def active_tape() -> "Tape | None":
    return _ACTIVE.get()


class Tape:
    """Ordered record of executed operations.

    Use as a context manager. With ``record=False`` the tape only meters, which is
    how forward-only FLOPs measurements run.

        >>> with Tape() as tape:
        ...     y = ops.sum(ops.mul(x, x))
        >>> (gx,) = tape.gradient(y, [x])
    """

    def __init__(self, meter: FlopsMeter | None = None, record: bool = True):
        self.meter = meter
        self.record = record
        self.records: list[_Record] = []
        self._tracked: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def push(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> None:
        self.records.append(_Record(out, inputs, backward, op))
        self._tracked.add(id(out))

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``target`` with respect to ``sources``.

        Sources the target does not depend on get zero arrays.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {list(target.shape)}")
        sources = list(sources)
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape)}
        for rec in reversed(self.records):
            key = id(rec.out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not self.is_tracked(inp):
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{rec.op} backward produced {list(ig.shape)} for input {list(inp.shape)}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return [grads.get(id(s), np.zeros(s.shape)) for s in sources]


class no_grad:
    """Run a block with no tape at all (no recording, no metering)."""

    def __enter__(self):
        self._token = _ACTIVE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
