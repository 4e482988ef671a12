"""Input validation helpers shared by the estimators and free functions."""

import numbers

import numpy as np


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_count(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_vector(v, n, name="vector", allow_batch=True):
    """Return ``v`` as a float array whose last axis has length ``n``."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0 or (not allow_batch and arr.ndim != 1):
        raise ValueError(f"{name} must be a 1-d array of length {n}")
    if arr.shape[-1] != n:
        raise ValueError(f"{name} has length {arr.shape[-1]}, expected {n}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_hs_matrix(m, n, name="matrix"):
    arr = np.asarray(m, dtype=float)
    if arr.ndim < 2 or arr.shape[-2:] != (n, n):
        raise ValueError(f"{name} must have trailing shape ({n}, {n}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_uniform_grid(grid, name="grid"):
    """Validate a strictly increasing uniform grid starting at 0; return (grid, dt)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError(f"{name} needs at least two time points")
    if grid[0] != 0.0:
        raise ValueError(f"{name} must start at t=0")
    steps = np.diff(grid)
    if np.any(steps <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    dt = (grid[-1] - grid[0]) / steps.size
    if not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise ValueError(f"{name} must be uniform")
    return grid, float(dt)
