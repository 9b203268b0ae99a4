"""Minimal dense-vector algebra with deterministic reductions.

Vectors are plain 1-D float64 numpy arrays. Reductions (dot, norm2) use
compensated summation over the elements in index order, so results are
bit-stable across runs and independent of BLAS threading. Everything here
is pure; inputs are never mutated.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError

Vector = np.ndarray


def as_vector(data) -> Vector:
    """Coerce to a finite 1-D float64 array, raising NumericError otherwise."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NumericError("vector contains NaN or Inf")
    return v


def dot(x: Vector, y: Vector) -> float:
    """Exactly-rounded dot product (compensated summation in index order)."""
    if x.shape != y.shape:
        raise DimensionError(f"dot: shapes {x.shape} vs {y.shape}")
    return math.fsum((x * y).tolist())


def norm2(v: Vector) -> float:
    """Euclidean norm, sqrt of the compensated sum of squares."""
    return math.sqrt(math.fsum((v * v).tolist()))


def norm2_sq(v: Vector) -> float:
    """Squared Euclidean norm with the same reduction as norm2."""
    return math.fsum((v * v).tolist())


def norm_inf(v: Vector) -> float:
    """Max-magnitude norm; 0.0 for the empty or zero vector."""
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v)))


def axpy(a: float, x: Vector, y: Vector) -> Vector:
    """Return a*x + y without touching the operands."""
    if x.shape != y.shape:
        raise DimensionError(f"axpy: shapes {x.shape} vs {y.shape}")
    return a * x + y
