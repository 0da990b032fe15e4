"""Tensor value type and the operation tape used for reverse-mode gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(precision)


class Tensor:
    """Dense numeric array with gradient bookkeeping.

    Feature maps are 4-D ``(n, c, h, w)``; parameters may be 1-D (biases, BN
    affine terms) and losses are 0-D.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the ``with`` block whose
    inputs need gradients is appended in execution order, so the list is
    topologically sorted by construction.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        output._tape = self
        self._ids.add(id(output))
        self.ops.append(_Op(name, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None, retain: bool = False) -> None:
        """Populate ``.grad`` on every leaf tensor that requires it.

        ``grad`` seeds d(objective)/d(loss); it defaults to one, which requires a
        scalar loss.  Unless ``retain`` is set the recorded operations are
        released afterwards, freeing the saved activations.
        """
        if id(loss) not in self._ids or loss._tape is not self:
            raise ValueError("loss tensor was not produced by an operation on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"implicit gradient needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        else:
            grad = np.asarray(grad, dtype=loss.dtype)
            if grad.shape != loss.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != loss shape {loss.shape}")

        pending: dict[int, np.ndarray] = {id(loss): grad}
        for op in reversed(self.ops):
            g = pending.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._ids:
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                else:
                    # leaf: accumulate across fan-out and across backward calls
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        if not retain:
            self.release()

    def release(self) -> None:
        for op in self.ops:
            op.output._tape = None
        self.ops.clear()
        self._ids.clear()


_active: list[Tape] = []


def current_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active[:] = saved


def backward(loss: Tensor, grad: Optional[np.ndarray] = None, retain: bool = False) -> None:
    """Run the backward pass on the tape that produced ``loss``."""
    if loss._tape is None:
        raise ValueError("loss tensor is not on any tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss, grad, retain)
