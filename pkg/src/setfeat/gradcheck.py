"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward, get_precision


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    coords_checked: int


def grad_check(
    f: Callable[[Tensor], Tensor],
    theta: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of f at theta with central differences.

    f must be deterministic and the engine must be in 64-bit mode.  Every
    coordinate is checked when theta has at most max_coords entries;
    otherwise a random subset of max(32, max_coords) coordinates is drawn.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if get_precision() != "f64":
        raise ValueError("grad_check requires the engine to be in f64 precision mode")

    theta.grad = None
    loss = f(theta)
    backward(loss)
    analytic = (
        theta.grad.copy() if theta.grad is not None else np.zeros_like(theta.data)
    )

    n = theta.data.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = rng or Rng(0x5EED)
        coords = rng.choice(n, max(32, max_coords))

    flat = theta.data.reshape(-1)
    a_flat = analytic.reshape(-1)
    max_rel = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(theta).item()
        flat[i] = orig - step
        f_minus = f(theta).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(a_flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > max_rel:
            max_rel = rel
    theta.grad = None
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, coords_checked=len(coords))
