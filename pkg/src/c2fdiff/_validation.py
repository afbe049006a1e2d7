"""Input validation helpers shared across modules."""

from __future__ import annotations

import numbers

import numpy as np


def check_batch(x, name: str = "x", ndim: int | None = 4) -> np.ndarray:
    """Return ``x`` as a finite float64 array, optionally checking its rank."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_power_of_two(value, name: str = "factor", minimum: int = 1) -> int:
    value = check_positive_int(value, name, minimum)
    if value & (value - 1):
        raise ValueError(f"{name} must be a power of two, got {value}")
    return value


def check_time(t, t_max: float, name: str = "t") -> float:
    t = float(t)
    if not np.isfinite(t) or t < 0.0 or t > t_max:
        raise ValueError(f"{name}={t} outside [0, {t_max}]")
    return t
