"""
Dense vector/matrix primitives shared by every other module.

All values are float64 numpy arrays. Functions are pure and never modify
their inputs.
"""
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .error_handler import DegenerateDirectionError, ShapeMismatchError, ValidationError

FLOAT = np.float64


def as_vector(values) -> np.ndarray:
    """Copy ``values`` into a finite 1-D float64 array."""
    v = np.array(values, dtype=FLOAT)
    if v.ndim != 1:
        raise ShapeMismatchError(f"expected a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite entry in vector")
    return v


def as_matrix(values, cols: int = -1) -> np.ndarray:
    """Copy ``values`` into a finite 2-D float64 array, optionally checking the column count."""
    m = np.array(values, dtype=FLOAT)
    if m.ndim == 1 and m.size == 0:
        m = m.reshape(0, max(cols, 0))
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got shape {m.shape}")
    if cols >= 0 and m.shape[1] != cols:
        raise ShapeMismatchError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("non-finite entry in matrix")
    return m


def l2_normalize(v) -> np.ndarray:
    """
    Scale a vector to unit Euclidean norm.

    Raises:
        DegenerateDirectionError: if ``v`` is the zero vector
    """
    v = as_vector(v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateDirectionError()
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise ``l2_normalize``; any all-zero row is an error."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateDirectionError()
    return m / norms


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between ``u`` and ``v``, clamped to [-1, 1]."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ShapeMismatchError(f"length mismatch: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateDirectionError()
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def softmax(v) -> np.ndarray:
    """Softmax along the last axis, computed with max subtraction."""
    v = np.asarray(v, dtype=FLOAT)
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite logits")
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(v: np.ndarray) -> np.ndarray:
    """Log-softmax along the last axis."""
    v = np.asarray(v, dtype=FLOAT)
    return v - logsumexp(v, axis=-1, keepdims=True)


def finite_diff_gradient(scalar_fn: Callable[[np.ndarray], float], x, eps: float = 1e-5,
                         coords=None) -> np.ndarray:
    """
    Central-difference gradient of ``scalar_fn`` at ``x``.

    ``x`` may have any shape; the result has the same shape. When ``coords``
    (flat indices) is given, only those entries are differenced and the rest of
    the returned gradient is zero.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    x = np.array(x, dtype=FLOAT)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    indices = range(flat_x.size) if coords is None else coords
    for i in indices:
        original = flat_x[i]
        flat_x[i] = original + eps
        f_plus = scalar_fn(x.copy())
        flat_x[i] = original - eps
        f_minus = scalar_fn(x.copy())
        flat_x[i] = original
        flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=FLOAT).reshape(-1)
    n = np.asarray(numeric, dtype=FLOAT).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def upper_pairs(n: int):
    """All unordered index pairs (i < j) of ``n`` items in lexicographic order."""
    return np.triu_indices(n, k=1)
