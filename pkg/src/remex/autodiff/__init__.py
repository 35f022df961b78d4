"""Minimal reverse-mode automatic differentiation on numpy arrays."""
from .gradcheck import check_gradients
from .optim import Adam, lr_schedule
from .tensor import (Tape, Tensor, active_tape, finite_check_enabled, parameter,
                     set_finite_check, zero_grad)
from . import ops

__all__ = [
    "Adam", "Tape", "Tensor", "active_tape", "check_gradients",
    "finite_check_enabled", "lr_schedule", "ops", "parameter",
    "set_finite_check", "zero_grad",
]
