"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_positive(value, name):
    """Raise ValueError unless ``value`` is a finite, strictly positive scalar."""
    v = float(value)
    if not np.isfinite(v) or v <= 0.0:
        raise ValueError(f"{name} must be finite and > 0, got {value!r}")
    return v


def check_nonnegative(value, name):
    v = float(value)
    if not np.isfinite(v) or v < 0.0:
        raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
    return v


def check_unit_interval(value, name):
    v = float(value)
    if not np.isfinite(v) or not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return v


def check_finite(value, name):
    v = float(value)
    if not np.isfinite(v):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return v


def as_float_array(values, name, ndim=1, nonneg=False):
    """Coerce to a float ndarray, checking dimensionality and finiteness."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if nonneg and arr.size and arr.min() < 0.0:
        raise ValueError(f"{name} contains negative entries")
    return arr


def check_probability_vector(p, name="p", tol=1e-12):
    """Validate a probability vector: nonnegative entries summing to 1 within tol."""
    arr = as_float_array(p, name, nonneg=True)
    total = arr.sum()
    if abs(total - 1.0) > max(tol, 64 * np.finfo(float).eps * arr.size):
        raise ValueError(f"{name} must sum to 1 (got {total:.17g})")
    return arr
