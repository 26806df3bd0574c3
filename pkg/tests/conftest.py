"""Shared test helpers: finite-difference oracle and error measures."""

from __future__ import annotations

import numpy as np

from cdsl_lab.diffcore import Tensor


def call_scalar(fn, arrays) -> float:
    out = fn(*arrays)
    if isinstance(out, Tensor):
        return float(out.values)
    return float(out)


def fd_gradient(fn, arrays, wrt: int, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar fn w.r.t. arrays[wrt]."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    grad = np.zeros_like(base[wrt])
    flat = grad.reshape(-1)
    target = base[wrt].reshape(-1)
    for i in range(target.size):
        keep = target[i]
        target[i] = keep + h
        up = call_scalar(fn, base)
        target[i] = keep - h
        down = call_scalar(fn, base)
        target[i] = keep
        flat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())
