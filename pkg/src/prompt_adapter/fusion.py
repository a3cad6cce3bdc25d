"""Logit computation and prediction on the inference path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, KindMismatch, NonFinite, ShapeMismatch, ValidationError
from .numerics import as_matrix

KINDS = ("clip", "cache", "final")


@dataclass(frozen=True)
class LogitBatch:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown logit kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise NonFinite(f"{self.kind} logits contain non-finite entries")

    @property
    def shape(self):
        return self.values.shape


def clip_logits(image_features, classifier, scale: float = 1.0) -> LogitBatch:
    """Scaled cosine similarity of each image feature with each class row."""
    f = as_matrix(image_features, "image features")
    w = as_matrix(classifier, "classifier")
    if f.shape[1] != w.shape[1]:
        raise DimensionMismatch(f"feature dim {f.shape[1]} != classifier dim {w.shape[1]}")
    if not scale > 0:
        raise ValidationError("logit scale must be positive")
    return LogitBatch(scale * (f @ w.T), "clip")


def cache_batch(values) -> LogitBatch:
    return LogitBatch(np.asarray(values, dtype=np.float64), "cache")


def final_logits(g_clip: LogitBatch, g_cache: LogitBatch, alpha: float) -> LogitBatch:
    if g_clip.kind != "clip" or g_cache.kind != "cache":
        raise KindMismatch(f"expected (clip, cache), got ({g_clip.kind}, {g_cache.kind})")
    if g_clip.shape != g_cache.shape:
        raise ShapeMismatch(f"clip {g_clip.shape} vs cache {g_cache.shape}")
    return LogitBatch(alpha * g_cache.values + g_clip.values, "final")


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    x = logits.values if isinstance(logits, LogitBatch) else np.asarray(logits, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("predict needs a non-empty B x N logit matrix")
    if not np.all(np.isfinite(x)):
        raise NonFinite("cannot predict from non-finite logits")
    return np.argmax(x, axis=1)
