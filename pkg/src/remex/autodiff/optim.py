"""Adam optimizer and learning-rate schedules."""
from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


class Adam:
    """Adam with bias correction and L2 weight decay folded into the gradient.

    Parameters are a name -> Tensor mapping. Tensors with requires_grad
    False, or with no accumulated gradient, are left untouched by step().
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr * lr_scale) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_schedule(kind: str, step: int, total_steps: int, warmup_rate: float = 0.1,
                gamma: float = 0.9, period: int = 1) -> float:
    """Learning-rate multiplier at ``step``.

    ``linear``: ramp 0 -> 1 over the first warmup_rate*total_steps steps,
    then decay linearly to 0 at total_steps. ``steplr``: gamma**(step//period).
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if kind == "linear":
        warmup = warmup_rate * total_steps
        if step < warmup:
            return step / warmup
        if total_steps == warmup:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warmup))
    if kind == "steplr":
        if period <= 0:
            raise ValueError("period must be positive")
        return float(gamma ** (step // period))
    raise ValueError(f"unknown schedule kind {kind!r}")
