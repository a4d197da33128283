"""Dense real matrix helpers for small systems (d <= 8).

Matrices are plain float64 numpy arrays, row-major. Everything here is a
pure function, safe to call concurrently.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError, SingularMatrixError

# |det| below this is treated as singular; callers with an A=0 branch
# should test ``is_effectively_zero`` first.
DET_FLOOR = 1e-12

# max-abs-entry threshold below which a matrix is treated as exactly zero
ZERO_NORM_TOL = 1e-10

_SERIES_TERMS = 14  # truncation error ~0.5^15/15! once scaled below 0.5


def as_square_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise InvalidArgumentError("matrix has non-finite entries")
    return a


def as_vector(v, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise InvalidArgumentError(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise InvalidArgumentError(f"expected length {dim}, got {v.size}")
    if not np.isfinite(v).all():
        raise InvalidArgumentError("vector has non-finite entries")
    return v


def is_effectively_zero(a: np.ndarray, tol: float = ZERO_NORM_TOL) -> bool:
    """True if every entry of ``a`` is below ``tol`` in absolute value."""
    return bool(np.max(np.abs(a)) < tol) if a.size else True


def mat_exp(a, s: float = 1.0) -> np.ndarray:
    """exp(a*s) by scaling-and-squaring with a truncated power series.

    Accurate to ~1e-14 relative for the small, mild matrices this package
    produces; robustness is preferred over speed at d <= 8.
    """
    a = as_square_matrix(a)
    if not math.isfinite(s):
        raise InvalidArgumentError("scale factor must be finite")
    m = a * s
    norm = float(np.max(np.sum(np.abs(m), axis=1))) if m.size else 0.0
    squarings = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    m = m / (2.0**squarings)
    eye = np.eye(a.shape[0])
    result = eye.copy()
    for k in range(_SERIES_TERMS, 0, -1):
        result = eye + (m @ result) / k
    for _ in range(squarings):
        result = result @ result
    return result


def mat_inv(a, det_floor: float = DET_FLOOR) -> np.ndarray:
    """Inverse of ``a``; raises SingularMatrixError when |det| < det_floor."""
    a = as_square_matrix(a)
    det = float(np.linalg.det(a))
    if abs(det) < det_floor:
        raise SingularMatrixError(f"|det| = {abs(det):.3e} below floor {det_floor:.3e}")
    return np.linalg.inv(a)
