"""Key-value cache model: few-shot features as keys, one-hot labels as values."""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    ChecksumMismatch,
    ConfigHashWarning,
    DimensionMismatch,
    FormatError,
    ShotCountMismatch,
    UnnormalizedFeature,
    ValidationError,
)
from .numerics import UNIT_TOL, as_matrix, is_unit_rows, one_hot_matrix

CACHE_MAGIC = b"PACM"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIB32s")


@dataclass(frozen=True)
class AdapterHyperparams:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be > 0, got {self.beta}")


@dataclass
class CacheModel:
    keys: np.ndarray  # (N*K) x d, class-major
    labels: np.ndarray  # N*K class indices
    n_classes: int
    shots: int
    learnable: bool = False
    renormalize: bool = True
    config_hash: str = ""

    @property
    def values(self) -> np.ndarray:
        return one_hot_matrix(self.labels, self.n_classes)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def copy(self) -> "CacheModel":
        return CacheModel(
            self.keys.copy(),
            self.labels.copy(),
            self.n_classes,
            self.shots,
            self.learnable,
            self.renormalize,
            self.config_hash,
        )


def build_cache(features, labels, n_classes: int | None = None, config_hash: str = "") -> CacheModel:
    """Stack K-shot features class-major into a cache with one-hot values.

    Every class in ``range(n_classes)`` must contribute the same number of
    unit-norm features.
    """
    feats = as_matrix(features, "features")
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (feats.shape[0],):
        raise DimensionMismatch("one label per feature row is required")
    if n_classes is None:
        n_classes = int(lab.max()) + 1
    if n_classes < 2:
        raise ValidationError("a cache needs at least two classes")
    if lab.min() < 0 or lab.max() >= n_classes:
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(lab, minlength=n_classes)
    if np.any(counts != counts[0]) or counts[0] == 0:
        raise ShotCountMismatch(f"per-class feature counts differ: {counts.tolist()}")
    if not is_unit_rows(feats, UNIT_TOL):
        raise UnnormalizedFeature("cache keys must be unit-norm")
    order = np.argsort(lab, kind="stable")
    return CacheModel(
        keys=feats[order].copy(),
        labels=lab[order],
        n_classes=n_classes,
        shots=int(counts[0]),
        config_hash=config_hash,
    )


def _check_queries(queries, cache: CacheModel, beta: float) -> np.ndarray:
    q = as_matrix(queries, "queries")
    if q.shape[1] != cache.dim:
        raise DimensionMismatch(f"query dim {q.shape[1]} != cache dim {cache.dim}")
    if not beta > 0:
        raise ValidationError("beta must be positive")
    return q


def affinity(queries, cache: CacheModel, beta: float) -> np.ndarray:
    """``exp(-beta * (1 - q . k))`` for every query/key pair."""
    q = _check_queries(queries, cache, beta)
    return np.exp(-beta * (1.0 - q @ cache.keys.T))


def cache_logits(queries, cache: CacheModel, beta: float) -> np.ndarray:
    """Affinity-weighted sum of one-hot values: B x N."""
    return affinity(queries, cache, beta) @ cache.values


def cache_logits_tensor(queries, keys, values: np.ndarray, beta: float):
    """Differentiable cache logits; ``queries`` and ``keys`` may be watched."""
    sims = ad.matmul(queries, ad.transpose(keys))
    return ad.matmul(ad.exp(ad.mul(ad.sub(sims, 1.0), beta)), values)


def normalize_keys(cache: CacheModel) -> None:
    cache.keys = cache.keys / np.linalg.norm(cache.keys, axis=1, keepdims=True)


def _hash_bytes(config_hash: str) -> bytes:
    if not config_hash:
        return bytes(32)
    raw = bytes.fromhex(config_hash)
    if len(raw) > 32:
        raise ValidationError("config hash longer than 32 bytes")
    return raw.ljust(32, b"\0")


def cache_to_bytes(cache: CacheModel) -> bytes:
    nk, d = cache.keys.shape
    header = _HEADER.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        cache.n_classes,
        cache.shots,
        d,
        int(cache.learnable),
        _hash_bytes(cache.config_hash),
    )
    body = (
        header
        + np.ascontiguousarray(cache.keys, dtype="<f4").tobytes()
        + np.ascontiguousarray(cache.labels, dtype="<u4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def cache_from_bytes(blob: bytes, expected_config_hash: str | None = None) -> CacheModel:
    if len(blob) < _HEADER.size + 4:
        raise FormatError("cache file truncated: header incomplete")
    magic, version, n, k, d, learnable, hash_raw = _HEADER.unpack_from(blob, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    rows = n * k
    expected = _HEADER.size + rows * d * 4 + rows * 4 + 4
    if len(blob) != expected:
        raise FormatError(f"cache file has {len(blob)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[: expected - 4]) != crc:
        raise ChecksumMismatch("cache CRC32 mismatch")
    off = _HEADER.size
    keys = np.frombuffer(blob, dtype="<f4", count=rows * d, offset=off).reshape(rows, d)
    labels = np.frombuffer(blob, dtype="<u4", count=rows, offset=off + rows * d * 4)
    config_hash = "" if hash_raw == bytes(32) else hash_raw.hex()
    if expected_config_hash is not None and expected_config_hash != config_hash:
        warnings.warn(
            f"cache was built under config {config_hash or '<none>'}, "
            f"current config is {expected_config_hash}",
            ConfigHashWarning,
            stacklevel=3,
        )
    lab = labels.astype(np.int64)
    if lab.size and lab.max() >= n:
        raise FormatError("cache label out of range")
    if not np.array_equal(lab, np.repeat(np.arange(n), k)):
        raise FormatError("cache rows are not class-major")
    return CacheModel(
        keys=keys.astype(np.float64),
        labels=lab,
        n_classes=n,
        shots=k,
        learnable=bool(learnable),
        config_hash=config_hash,
    )


def save_cache(cache: CacheModel, path) -> None:
    Path(path).write_bytes(cache_to_bytes(cache))


def load_cache(path, expected_config_hash: str | None = None) -> CacheModel:
    return cache_from_bytes(Path(path).read_bytes(), expected_config_hash)
