"""Dense numerics on 64-bit arrays: normalization, similarities and losses.

Embedding vectors and matrices are plain ``float64`` numpy arrays; rows of an
embedding matrix are points in the joint space. Functions here are pure and
forward-only; differentiable counterparts live in :mod:`prompt_adapter.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NonFinite,
    ValidationError,
    ZeroNorm,
)

NORM_EPS = 1e-12
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    reduction: str = "sum"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if self.reduction != "sum":
            raise ValidationError(f"unsupported reduction {self.reduction!r}")


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} has non-finite entries")
    return a


def is_unit_rows(x: np.ndarray, tol: float = UNIT_TOL) -> bool:
    norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Scale ``v`` (a vector, or each row of a matrix) to unit L2 norm."""
    a = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise ZeroNorm(f"cannot normalize a vector with norm <= {eps}")
    return a / norms


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise dot products of row-normalized ``a`` (n x d) and ``b`` (m x d)."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimension {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


def logsumexp(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("softmax input has non-finite entries")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


def _check_targets(targets, n_classes: int, n_rows: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != n_rows:
        raise DimensionMismatch(f"expected {n_rows} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise IndexOutOfRange(f"targets must lie in [0, {n_classes})")
    return t.astype(np.int64)


def cross_entropy(logits, targets, reduction: str = "mean") -> float:
    """Batch cross entropy of raw logits against integer class targets."""
    x = as_matrix(logits, "logits")
    t = _check_targets(targets, x.shape[1], x.shape[0])
    per_row = logsumexp(x, axis=1) - x[np.arange(x.shape[0]), t]
    if reduction == "mean":
        return float(np.mean(per_row))
    if reduction == "sum":
        return float(np.sum(per_row))
    raise ValidationError(f"unknown reduction {reduction!r}")


def contrastive_losses(u, v, cfg: ContrastiveConfig = ContrastiveConfig()):
    """Symmetric image/text contrastive losses over paired rows of ``u`` and ``v``.

    Returns ``(image_to_text, text_to_image, total)`` with sum reduction over
    the batch.
    """
    u = as_matrix(u, "U")
    v = as_matrix(v, "V")
    if u.shape != v.shape:
        raise DimensionMismatch(f"paired batches differ in shape: {u.shape} vs {v.shape}")
    sims = cosine_similarity_matrix(u, v) / cfg.temperature
    idx = np.arange(u.shape[0])
    i2t = cross_entropy(sims, idx, reduction="sum")
    t2i = cross_entropy(sims.T, idx, reduction="sum")
    return i2t, t2i, i2t + t2i


def one_hot_matrix(labels, n_classes: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise DimensionMismatch("labels must be 1-D")
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise IndexOutOfRange(f"labels must lie in [0, {n_classes})")
    out = np.zeros((lab.shape[0], n_classes), dtype=np.float64)
    out[np.arange(lab.shape[0]), lab.astype(np.int64)] = 1.0
    return out


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    p: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-4,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    Each coordinate's error is ``|fd_k - g_k| / max(1, |g_k|)``. ``p`` is not
    modified.
    """
    p = np.array(p, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != p.shape:
        raise DimensionMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
    flat = p.reshape(-1)
    g_flat = g.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = float(f(p))
        flat[k] = orig - h
        f_minus = float(f(p))
        flat[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFinite(f"probe at coordinate {k} evaluated non-finite")
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(fd - g_flat[k]) / max(1.0, abs(g_flat[k]))
        worst = max(worst, err)
    return worst
