"""Dense tensors and the reverse-mode tape.

A Tensor wraps a numpy array. Operations (see ops.py) record themselves on
the innermost active Tape; Tape.backward walks the records in reverse and
accumulates gradients into the ``.grad`` of every tensor that has
``requires_grad`` set. Calling backward twice on the same tape accumulates
twice; callers that want fresh gradients call ``zero_grad`` first.

Outside any ``with Tape()`` block the ops run forward-only, which is what
evaluation paths use.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from ..errors import NumericError, TapeStateError

# Finite checking after every op is cheap at the array sizes this package
# works with and catches numeric blowups at the op that produced them.
_FINITE_CHECK = True


def set_finite_check(enabled: bool) -> bool:
    """Toggle the per-op finite check; returns the previous setting."""
    global _FINITE_CHECK
    previous = _FINITE_CHECK
    _FINITE_CHECK = bool(enabled)
    return previous


def finite_check_enabled() -> bool:
    return _FINITE_CHECK


class Tensor:
    """Array with an optional gradient slot.

    Parameters
    ----------
    data : array-like
        Converted with np.asarray. Integer input is promoted to float64;
        floating input keeps its dtype unless ``dtype`` overrides it.
    requires_grad : bool
        Leaf flag. Gradients accumulate into ``.grad`` for these tensors.
    name : str, optional
        Used in error messages and optimizer state.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Arithmetic sugar; canonical definitions live in ops.py.
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

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def parameter(data, name: str, dtype=np.float32) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: tuple, backward: Callable) -> None:
    """Attach an op record to the active tape, if any.

    ``backward`` maps the output gradient to a tuple of input gradients
    (None for inputs that take no gradient), one per entry of ``inputs``.
    """
    if _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        tape._records.append((out, inputs, backward))
        tape._owned.add(id(out))


class Tape:
    """Records ops in execution order; backward replays them reversed."""

    def __init__(self):
        self._records: list[tuple] = []
        self._owned: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    @property
    def num_records(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``.

        ``loss`` must be a scalar produced by an op recorded on this tape.
        """
        if not self._records or id(loss) not in self._owned:
            raise TapeStateError(
                "backward target was not produced during this tape's forward pass")
        if loss.data.size != 1:
            raise TapeStateError(
                f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward in reversed(self._records):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            input_grads = backward(g_out)
            for tensor, g_in in zip(inputs, input_grads):
                if g_in is None:
                    continue
                if g_in.shape != tensor.data.shape:
                    raise NumericError(
                        f"internal: gradient shape {g_in.shape} does not match "
                        f"input shape {tensor.data.shape}")
                g_in = g_in.astype(tensor.data.dtype, copy=False)
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                seen[key] = tensor
        for key, tensor in seen.items():
            if not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grads[key]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
