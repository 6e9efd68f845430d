"""Dense float32 tensor and the reverse-mode tape."""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError, StateError

MAX_NDIM = 4


class Tensor:
    """Row-major float32 array with 1 to 4 axes.

    Thin value wrapper around a contiguous ``np.float32`` array. Operations
    never mutate their inputs.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, copy: bool = False):
        arr = np.array(data, dtype=np.float32, copy=copy or None)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= MAX_NDIM:
            raise ShapeError(f"tensor must have 1..{MAX_NDIM} axes, got {arr.ndim}")
        if 0 in arr.shape:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.dims

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.dims}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data, copy=True)

    @classmethod
    def zeros(cls, *dims: int) -> "Tensor":
        return cls(np.zeros(dims, dtype=np.float32))

    @classmethod
    def full(cls, dims: Sequence[int], value: float) -> "Tensor":
        return cls(np.full(tuple(dims), value, dtype=np.float32))

    def __repr__(self):
        return f"Tensor(dims={self.dims})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))

    __hash__ = object.__hash__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# (output, inputs, backward) where backward maps the upstream gradient to one
# gradient per input (None for inputs that need none).
Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "oflseg_active_tape", default=None
)


class Tape:
    """Records differentiable ops executed while it is active.

    Usage::

        with Tape() as tape:
            tape.watch(w)
            loss = some_ops(w)
        (gw,) = tape.gradient(loss, [w])

    Only tensors that are watched, or derived from watched tensors, are tracked.
    Ops whose inputs are all untracked are not recorded at all.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._tracked: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __len__(self):
        return len(self._records)

    @property
    def op_count(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: Iterable[Tensor], backward: Backward) -> None:
        inputs = tuple(inputs)
        if not any(self.is_tracked(t) for t in inputs):
            return
        self._tracked[id(out)] = out
        self._records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse sweep from a single-element ``target``.

        Returns one float32 array per source; untouched sources get zeros.
        """
        if target.data.size != 1:
            raise ShapeError("gradient target must be a single-element tensor")
        if not self.is_tracked(target):
            raise StateError("gradient target was not computed from any watched tensor")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data, dtype=np.float64)}
        for out, inputs, backward in reversed(self._records):
            up = grads.get(id(out))
            if up is None:
                continue
            in_grads = backward(up)
            for t, g in zip(inputs, in_grads):
                if g is None or not self.is_tracked(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=np.float64)
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(np.float32).reshape(s.dims))
        return out


def active_tape() -> Tape | None:
    return _active_tape.get()


class no_tape:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


def record(out: Tensor, inputs: Iterable[Tensor], backward: Backward) -> Tensor:
    tape = _active_tape.get()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out
