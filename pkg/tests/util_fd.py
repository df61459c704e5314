"""Shared helpers for finite-difference gradient audits.

Relative error is measured against the larger tensor's max magnitude, so a
uniformly tiny gradient does not inflate the ratio while any real
disagreement still shows up.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

FD_STEP = 1e-5


def central_diff(
    f: Callable[[], float], arr: np.ndarray, eps: float = FD_STEP
) -> np.ndarray:
    """Central finite differences of a scalar function wrt ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference relative to the tensors' max magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
