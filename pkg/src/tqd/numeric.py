"""Dense float64 kernels used by the differentiable graph.

All functions are pure and operate on 2-D ``numpy`` arrays.  Row reductions
that must be leak-free (the softmax normaliser) accumulate strictly left to
right so that appending exactly-zero terms never changes a single bit.
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {a.shape}")
    return a


def check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return a @ b


def row_sum_left_to_right(x: np.ndarray) -> np.ndarray:
    """Sum each row sequentially from column 0 upward; returns shape (rows, 1)."""
    if x.shape[1] == 0:
        return np.zeros((x.shape[0], 1))
    return np.add.accumulate(x, axis=1)[:, -1:]


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax restricted to entries where ``mask == 0``.

    Blocked entries (``mask == 1``) are multiplied by zero before the
    normaliser is formed, so they contribute nothing at all.  A row whose
    entries are all blocked yields a zero row; the boolean vector returned
    alongside the output flags such rows.
    """
    check_same_shape("masked_softmax", scores, mask)
    allowed = mask == 0
    any_allowed = allowed.any(axis=1, keepdims=True)
    row_max = np.max(np.where(allowed, scores, -np.inf), axis=1, keepdims=True, initial=-np.inf)
    row_max = np.where(any_allowed, row_max, 0.0)
    shifted = np.where(allowed, scores - row_max, 0.0)
    weights = np.where(allowed, np.exp(shifted), 0.0)
    denom = row_sum_left_to_right(weights)
    safe = np.where(any_allowed, denom, 1.0)
    out = weights / safe
    return out, ~any_allowed[:, 0]


def masked_softmax_vjp(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cotangent of the scores given the softmax output and its cotangent."""
    inner = row_sum_left_to_right(out * g)
    return out * (g - inner)


def layer_norm(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Normalise each row to zero mean and unit variance; returns (y, 1/std)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm_vjp(y: np.ndarray, inv: np.ndarray, g: np.ndarray) -> np.ndarray:
    g_mean = g.mean(axis=1, keepdims=True)
    gy_mean = (g * y).mean(axis=1, keepdims=True)
    return inv * (g - g_mean - y * gy_mean)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-approximated GELU; returns (y, tanh term) for the backward pass."""
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_vjp(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)
