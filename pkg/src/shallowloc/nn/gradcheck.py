"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-4,
                     relative: bool = True, indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (modified in place).

    With ``relative`` the step for entry i is ``step * max(|x_i|, 1)``.
    Only ``indices`` (flat) are perturbed when given; others are left at 0.
    """
    grad = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        h = step * max(abs(orig), 1.0) if relative else step
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
