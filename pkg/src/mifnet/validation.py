"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def check_plane(a, name: str = "plane", *, finite: bool = True) -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, raising on bad input."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{name} is empty")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite samples")
    return arr


def check_same_shape(*arrays, names=None) -> None:
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(f"{n}={s}" for n, s in zip(names or range(len(shapes)), shapes))
        raise ValidationError(f"shape mismatch: {label}")


def check_unit_range(arr: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if arr.size and (arr.min() < -tol or arr.max() > 1 + tol):
        raise ValidationError(
            f"{name} samples must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]"
        )


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
