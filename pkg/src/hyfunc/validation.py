"""Input-validation helpers shared by the estimators and numeric ops."""

from __future__ import annotations

import numpy as np

from .errors import DimError, NumericsError, ShapeError


def as_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a 1-D float64 array; reject anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a 2-D float64 array; reject anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def require_finite(arr: np.ndarray, name: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite entries")
    return arr


def require_dim(vec: np.ndarray, dim: int, name: str = "vector") -> np.ndarray:
    if vec.shape != (dim,):
        raise DimError(f"{name} must have dimension {dim}, got shape {vec.shape}")
    return vec


def require_cols(mat: np.ndarray, cols: int, name: str = "matrix") -> np.ndarray:
    if mat.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} columns, got {mat.shape[1]}")
    return mat
