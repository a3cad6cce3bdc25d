"""Frozen toy text encoder and learnable prompt contexts.

The encoder maps ``[prompt vectors; class token embeddings]`` through
sinusoidal positions, pre-norm single-head transformer blocks, last-position
pooling and a linear projection, then L2-normalizes. All weights derive from
``(seed, layer, role)`` substreams; nothing here is ever serialized.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    DimensionMismatch,
    NotLearnable,
    SequenceTooLong,
    TokenOutOfVocab,
    ValidationError,
)
from .rng import substream

ROLES = ("wq", "wk", "wv", "wo", "ff1", "ff2")


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 0
    vocab_size: int = 64
    token_dim: int = 32
    embed_dim: int = 16
    n_blocks: int = 1
    max_len: int = 32

    def __post_init__(self):
        for name in ("vocab_size", "token_dim", "embed_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.n_blocks < 0:
            raise ValidationError("n_blocks must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassTokenSequence:
    class_id: int
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise ValidationError("a class token sequence needs at least one token")


@dataclass
class PromptContext:
    """``M`` context vectors in token-embedding space."""

    vectors: np.ndarray
    learnable: bool = True

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64).reshape(-1, np.shape(self.vectors)[-1])
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("prompt vectors must be finite")

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    def copy(self, learnable: bool | None = None) -> "PromptContext":
        return PromptContext(
            self.vectors.copy(), self.learnable if learnable is None else learnable
        )

    def checksum(self) -> str:
        return array_checksum(self.vectors)


def array_checksum(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return hashlib.sha256(a.tobytes()).hexdigest()[:16]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Block:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ff1: np.ndarray
    ff2: np.ndarray


@dataclass
class FrozenTextEncoder:
    config: EncoderConfig
    token_table: np.ndarray
    blocks: list = field(default_factory=list)
    projection: np.ndarray = None
    positions: np.ndarray = None

    @classmethod
    def from_config(cls, config: EncoderConfig) -> "FrozenTextEncoder":
        d_e, d = config.token_dim, config.embed_dim
        std = 1.0 / np.sqrt(d_e)

        def draw(layer: int, role: str, shape) -> np.ndarray:
            return substream(config.seed, "encoder", layer, role).normal(0.0, std, size=shape)

        token_table = draw(0, "token_table", (config.vocab_size, d_e))
        blocks = []
        for layer in range(1, config.n_blocks + 1):
            shapes = {
                "wq": (d_e, d_e),
                "wk": (d_e, d_e),
                "wv": (d_e, d_e),
                "wo": (d_e, d_e),
                "ff1": (d_e, 4 * d_e),
                "ff2": (4 * d_e, d_e),
            }
            blocks.append(Block(**{r: draw(layer, r, shapes[r]) for r in ROLES}))
        projection = draw(config.n_blocks + 1, "projection", (d_e, d))
        return cls(
            config=config,
            token_table=token_table,
            blocks=blocks,
            projection=projection,
            positions=sinusoidal_positions(config.max_len, d_e),
        )

    def weight_arrays(self) -> list:
        out = [self.token_table]
        for b in self.blocks:
            out.extend(getattr(b, r) for r in ROLES)
        out.append(self.projection)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.weight_arrays():
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()[:16]

    def with_token_table(self, table: np.ndarray) -> "FrozenTextEncoder":
        """A copy sharing the frozen block weights but with a new token table."""
        return FrozenTextEncoder(
            config=self.config,
            token_table=np.array(table, dtype=np.float64),
            blocks=self.blocks,
            projection=self.projection,
            positions=self.positions,
        )


def _check_tokens(enc: FrozenTextEncoder, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= enc.config.vocab_size):
        raise TokenOutOfVocab(f"token ids must lie in [0, {enc.config.vocab_size})")
    return ids


def _forward_sequences(enc: FrozenTextEncoder, x):
    """Run a batch of equal-length sequences (G x S x d_e) through the blocks.

    Returns the unnormalized projected last-position states (G x d).
    """
    seq_len = ad._val(x).shape[1]
    d_e = enc.config.token_dim
    h = ad.add(x, enc.positions[:seq_len])
    inv_sqrt = 1.0 / np.sqrt(d_e)
    for blk in enc.blocks:
        z = ad.rms_norm(h)
        q = ad.matmul(z, blk.wq)
        k = ad.matmul(z, blk.wk)
        v = ad.matmul(z, blk.wv)
        att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), inv_sqrt))
        h = ad.add(h, ad.matmul(ad.matmul(att, v), blk.wo))
        z = ad.rms_norm(h)
        h = ad.add(h, ad.matmul(ad.tanh(ad.matmul(z, blk.ff1)), blk.ff2))
    last = ad.getitem(h, (slice(None), seq_len - 1))
    return ad.matmul(last, enc.projection)


def encode_batch(enc: FrozenTextEncoder, prompt_vectors, classes: Sequence[ClassTokenSequence], table=None):
    """Differentiable class-text embeddings, one unit row per class.

    ``prompt_vectors`` may be a watched :class:`~prompt_adapter.autodiff.Tensor`
    (prompt tuning) or a plain array; ``table`` optionally overrides the token
    table with a watched tensor (toy pretraining). Classes are grouped by token
    length so each group runs as one batched forward pass.
    """
    pv = ad._val(prompt_vectors)
    if pv.ndim != 2 or pv.shape[1] != enc.config.token_dim:
        raise DimensionMismatch(
            f"prompt vectors must be M x {enc.config.token_dim}, got {pv.shape}"
        )
    m = pv.shape[0]
    if table is None:
        table = enc.token_table
    groups: dict[int, list[int]] = {}
    for i, cls in enumerate(classes):
        ids = _check_tokens(enc, cls.tokens)
        if m + ids.size > enc.config.max_len:
            raise SequenceTooLong(
                f"prompt length {m} + class length {ids.size} exceeds {enc.config.max_len}"
            )
        groups.setdefault(ids.size, []).append(i)

    outputs = []
    order = []
    for length, members in groups.items():
        ids = np.array([classes[i].tokens for i in members], dtype=np.int64)
        cls_emb = ad.take_rows(table, ids)
        if m:
            ctx = ad.broadcast_to(prompt_vectors, (len(members),) + pv.shape)
            seq = ad.concat([ctx, cls_emb], axis=1)
        else:
            seq = cls_emb
        outputs.append(_forward_sequences(enc, seq))
        order.extend(members)
    proj = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=0)
    if order != list(range(len(classes))):
        proj = ad.getitem(proj, np.argsort(np.array(order)))
    return ad.l2_normalize(proj)


def encode_text(enc: FrozenTextEncoder, prompt: PromptContext, cls: ClassTokenSequence) -> np.ndarray:
    return encode_batch(enc, prompt.vectors, [cls]).value[0]


def build_classifier_weights(
    enc: FrozenTextEncoder, prompt: PromptContext, classes: Sequence[ClassTokenSequence]
) -> np.ndarray:
    if len(classes) < 2:
        raise ValidationError("a classifier needs at least two classes")
    return encode_batch(enc, prompt.vectors, classes).value


def prompt_gradient(
    enc: FrozenTextEncoder,
    prompt: PromptContext,
    classes: Sequence[ClassTokenSequence],
    loss: Callable,
) -> np.ndarray:
    """Exact gradient of ``loss(classifier_weights)`` with respect to the prompt.

    ``loss`` receives the N x d classifier weights as a tape tensor and must
    build its result from :mod:`prompt_adapter.autodiff` operations.
    """
    if not prompt.learnable:
        raise NotLearnable("prompt is frozen")
    with ad.GradientTape() as tape:
        p = tape.watch(prompt.vectors)
        weights = encode_batch(enc, p, classes)
        value = loss(weights)
        (grad,) = tape.gradient(value, [p])
    return grad


def manual_prompt(enc: FrozenTextEncoder, template_tokens) -> PromptContext:
    ids = _check_tokens(enc, template_tokens)
    return PromptContext(enc.token_table[ids].copy().reshape(-1, enc.config.token_dim), learnable=False)


def random_prompt(length: int, token_dim: int, rng: np.random.Generator, std: float = 0.02) -> PromptContext:
    return PromptContext(rng.normal(0.0, std, size=(length, token_dim)), learnable=True)
