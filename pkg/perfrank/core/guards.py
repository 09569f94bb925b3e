"""
Guard functions for numerical inputs.

Each guard returns its (possibly converted) input on success and raises a
PerfRankError subclass otherwise, so callers can write `x = require_finite(x, "x")`.
"""

from typing import Sequence

import numpy as np

from perfrank.core.exceptions import ConfigurationError, DimensionMismatchError

UNIT_NORM_ATOL = 1e-9


def require_finite(values, what: str) -> np.ndarray:
    """Ensure every entry is finite."""
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ConfigurationError(f"{what} contains non-finite entries")
    return array


def require_same_dim(*vectors: np.ndarray, what: str = "vectors") -> int:
    """
    Ensure all vectors share their last dimension.

    Returns:
        The shared dimension d.

    Raises:
        DimensionMismatchError: If any two dimensions differ.
    """
    dims = {np.shape(v)[-1] for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatchError(f"{what} have mismatched dimensions {sorted(dims)}")
    return dims.pop()


def require_unit_norm(values, what: str, atol: float = UNIT_NORM_ATOL) -> np.ndarray:
    """Ensure the vector (or every row of a matrix) has unit L2 norm."""
    array = require_finite(values, what)
    norms = np.linalg.norm(array, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= atol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ConfigurationError(f"{what} must have unit L2 norm (worst deviation {worst:.3g})")
    return array


def require_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ConfigurationError(f"{name} must be > 0, got {value}")
    return value


def require_strictly_increasing(values: Sequence[float], name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 1 or np.any(np.diff(array) <= 0):
        raise ConfigurationError(f"{name} must be strictly increasing, got {list(values)}")
    return array
