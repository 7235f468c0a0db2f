"""Dense float64 kernels with shape checking.

Matrices are 2-D C-contiguous float64 numpy arrays in row-major order,
vectors are 1-D float64 arrays. All kernels are pure: identical inputs
produce bit-identical outputs. Heavy lifting is delegated to numpy; this
module pins the contracts (shape errors that name both shapes, stable
softmax) that the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError


def as_matrix(rows: int, cols: int, data) -> np.ndarray:
    """Build a rows x cols float64 matrix from row-major data."""
    out = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    return np.ascontiguousarray(out)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape("add", a, b)
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape("sub", a, b)
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise (Hadamard) product."""
    _check_same_shape("mul", a, b)
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * float(s)


def dot(a: np.ndarray, b: np.ndarray) -> float:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    return float(a @ b)


def l2_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a * a)))


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def softmax(v: np.ndarray) -> np.ndarray:
    """Probability vector of v, computed with max-subtraction for stability.

    Output entries are positive and sum to 1 within 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError(f"softmax: expected a non-empty vector, got shape {v.shape}")
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a matrix, same stabilization as softmax()."""
    if m.ndim != 2 or m.shape[1] == 0:
        raise DomainError(f"softmax_rows: expected a matrix with columns, got shape {m.shape}")
    e = np.exp(m - np.max(m, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient through softmax: given p = softmax(z) and dL/dp, return dL/dz."""
    _check_same_shape("softmax_backward", p, dp)
    return p * (dp - np.sum(p * dp))


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{what}: contains non-finite entries")
    return a
