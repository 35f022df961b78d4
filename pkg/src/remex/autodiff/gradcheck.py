"""Central-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tape, Tensor, zero_grad


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` builds the scalar loss from the params' current data each time it
    is called. Returns the maximum relative error
    |analytic - numeric| / max(1, |analytic|) over the checked coordinates.
    ``max_coords`` caps the number of coordinates checked per parameter
    (sampled with ``rng``); by default every coordinate is checked.
    """
    params = list(params)
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued function")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            f_plus = float(f().data)
            flat[i] = original - step
            f_minus = float(f().data)
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("non-finite function value during "
                                   "finite-difference probe")
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(float(ana_flat[i]) - numeric) / max(1.0, abs(float(ana_flat[i])))
            worst = max(worst, rel)
    return worst
