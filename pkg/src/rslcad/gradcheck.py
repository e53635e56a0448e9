"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPSILON = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    param_count: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def numerical_gradient(f: Callable[[], float], array: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(
    f: Callable[[], float],
    arrays: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    eps: float = EPSILON,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients against central differences for each array.

    ``f`` must read the arrays by reference so in-place perturbation is seen.
    """
    worst = 0.0
    count = 0
    for arr, ana in zip(arrays, analytic):
        num = numerical_gradient(f, arr, eps)
        if arr.size:
            worst = max(worst, float(relative_error(ana, num, floor).max()))
        count += arr.size
    return GradCheckReport(worst, count)
