"""Shared numeric transforms: temperature softmax, z-score, finite differences.

Every function here works on the last axis, so a single logit vector of
shape ``(C,)`` and a batch of shape ``(B, C)`` go through the same code.
All arithmetic is float64.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import OracleError, ShapeError

DEFAULT_NORM_EPS = 1e-6


def as_logits(z, name: str = "logits") -> np.ndarray:
    """Validate and convert to a float64 array with at least 2 channels."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ShapeError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[-1] < 2:
        raise ShapeError(f"{name} needs at least 2 channels, got {arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def softmax_with_temperature(z, T: float = 1.0) -> np.ndarray:
    """``exp(z/T) / sum(exp(z/T))`` along the last axis, max-subtracted."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = as_logits(z)
    scaled = z / T
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_with_temperature(z, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = as_logits(z)
    scaled = z / T
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    return scaled - np.log(np.exp(scaled).sum(axis=-1, keepdims=True))


def zscore_normalize(z, eps: float = DEFAULT_NORM_EPS) -> np.ndarray:
    """Center and scale each row by its population standard deviation.

    The divisor is ``max(std, eps)``: rows whose spread is at least ``eps``
    are scaled exactly (so the result is invariant under ``a*z + b`` for
    ``a > 0``), and near-constant rows cannot blow up. A constant row maps
    to all zeros.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    z = as_logits(z)
    centered = z - z.mean(axis=-1, keepdims=True)
    constant = np.ptp(z, axis=-1, keepdims=True) == 0
    centered = np.where(constant, 0.0, centered)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    return centered / np.maximum(std, eps)


def zscore_backward(z, grad_out, eps: float = DEFAULT_NORM_EPS) -> np.ndarray:
    """Pull a gradient w.r.t. ``zscore_normalize(z)`` back to ``z``.

    With d = z - mean, s = std and y = d / s (s >= eps):

        dz = (g - mean(g)) / s - d * mean(g * d) / s**3

    Below ``eps`` the divisor is the constant ``eps`` and only the
    centering term remains.
    """
    z = as_logits(z)
    g = np.asarray(grad_out, dtype=np.float64)
    check_same_shape(z, g)
    centered = z - z.mean(axis=-1, keepdims=True)
    constant = np.ptp(z, axis=-1, keepdims=True) == 0
    centered = np.where(constant, 0.0, centered)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    scaled = std >= eps
    s = np.where(scaled, std, eps)
    out = (g - g.mean(axis=-1, keepdims=True)) / s
    proj = (g * centered).mean(axis=-1, keepdims=True)
    correction = np.where(scaled, centered * proj / s**3, 0.0)
    return out - correction


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    z,
    h: float = 1e-5,
    vectorized: bool = False,
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector.

    With ``vectorized=True``, ``f`` receives all ``2*C`` perturbed points
    stacked as a ``(2C, C)`` array and must return ``2C`` values.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"expected a 1-D point, got shape {z.shape}")
    n = z.shape[0]
    step = h * np.eye(n)
    if vectorized:
        values = np.asarray(f(np.concatenate([z + step, z - step])), dtype=np.float64)
        if values.shape != (2 * n,):
            raise ShapeError(f"vectorized f returned shape {values.shape}, expected {(2 * n,)}")
        plus, minus = values[:n], values[n:]
    else:
        plus = np.array([f(z + step[i]) for i in range(n)], dtype=np.float64)
        minus = np.array([f(z - step[i]) for i in range(n)], dtype=np.float64)
    if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise OracleError("function returned a non-finite value near the evaluation point")
    return (plus - minus) / (2 * h)


def relative_error(actual, expected, floor: float = 1e-10) -> float:
    """Max-norm error scaled by the larger of the two max-norms."""
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    check_same_shape(a, b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)
