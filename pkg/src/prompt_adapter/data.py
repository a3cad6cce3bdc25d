"""Few-shot datasets, the synthetic world generator, and dataset files.

Stored features are float32-representable values (the file precision). Code
that needs unit rows at 64-bit precision uses :meth:`FewShotDataset.split`,
which re-normalizes in float64.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import (
    ClassTokenSequence,
    EncoderConfig,
    FrozenTextEncoder,
    encode_batch,
    manual_prompt,
)
from .errors import (
    ChecksumMismatch,
    EmptySplit,
    FormatError,
    IncompatibleEncoder,
    InsufficientShots,
    ManifestMismatch,
    RejectionBudgetExceeded,
    ValidationError,
)
from .numerics import l2_normalize
from .optim import OptimizerConfig, OptimizerState, adamw_step, cosine_lr
from .rng import substream

SPLITS = ("train", "val", "test")
SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}
PROVENANCES = ("synthetic-random", "synthetic-pretrained", "imported")
DATA_MAGIC = b"PADS"
DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<4sHII")
FEATURES_FILE = "features.bin"
MANIFEST_FILE = "manifest.json"
ALLOWED_SHOTS = (1, 2, 4, 8, 16, 20)
DEFAULT_TEMPLATE = (60, 61, 62, 63)


@dataclass(frozen=True)
class EpisodeSpec:
    shots: int
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ValidationError("shots must be >= 1")


@dataclass
class FewShotDataset:
    name: str
    n_classes: int
    classes: list
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    provenance: str = "imported"
    seed: int = 0
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise ValidationError("features, labels and splits must have matching rows")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        if len(self.classes) != self.n_classes:
            raise ValidationError("need one token sequence per class")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError("labels out of range")
        if np.any(self.splits > 2):
            raise ValidationError("split codes must be 0, 1 or 2")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def counts(self) -> dict:
        return {
            s: np.bincount(self.labels[self.splits == c], minlength=self.n_classes).tolist()
            for s, c in SPLIT_CODES.items()
        }

    def split_rows(self, name: str) -> np.ndarray:
        """Row indices of a split in canonical (class, original index) order."""
        rows = np.flatnonzero(self.splits == SPLIT_CODES[name])
        return rows[np.lexsort((rows, self.labels[rows]))]

    def split(self, name: str):
        rows = self.split_rows(name)
        if rows.size == 0:
            raise EmptySplit(f"dataset {self.name!r} has no {name} rows")
        return l2_normalize(self.features[rows]), self.labels[rows].copy()


# -- synthetic generation -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 10
    n_train: int = 32
    n_val: int = 50
    n_test: int = 100
    dim: int = 16
    sigma: float = 0.35
    mode: str = "pretrained"
    seed: int = 0
    separation: float = 0.5
    rejection_budget: int = 100_000
    template: tuple = DEFAULT_TEMPLATE
    vocab_size: int = 64
    token_dim: int = 32
    n_blocks: int = 1
    max_len: int = 32
    domain_shift: float = 0.5
    class_jitter: float = 0.5
    pretrain_steps: int = 300
    pretrain_lr: float = 0.01
    temperature: float = 0.07

    def __post_init__(self):
        object.__setattr__(self, "template", tuple(int(t) for t in self.template))
        if self.n_classes < 2:
            raise ValidationError("need at least two classes")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.mode not in ("random", "pretrained"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValidationError("every split needs at least one row per class")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            seed=self.seed,
            vocab_size=self.vocab_size,
            token_dim=self.token_dim,
            embed_dim=self.dim,
            n_blocks=self.n_blocks,
            max_len=self.max_len,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["template"] = list(self.template)
        return d


def class_token_sequences(n_classes: int, vocab_size: int, offset: int = 0) -> list:
    """Class ``g`` gets tokens ``(g mod V, (7g + 3) mod V)``; collisions bump the second token."""
    seen = set()
    out = []
    for i in range(n_classes):
        g = offset + i
        first, second = g % vocab_size, (7 * g + 3) % vocab_size
        for _ in range(vocab_size):
            if (first, second) not in seen:
                break
            second = (second + 1) % vocab_size
        else:
            raise ValidationError("vocabulary too small for unique class tokens")
        seen.add((first, second))
        out.append(ClassTokenSequence(i, (first, second)))
    return out


def sample_prototypes(n: int, dim: int, separation: float, rng: np.random.Generator, budget: int) -> np.ndarray:
    """Unit vectors whose pairwise cosines all stay below ``separation``."""
    protos = []
    draws = 0
    while len(protos) < n:
        if draws >= budget:
            raise RejectionBudgetExceeded(
                f"placed {len(protos)} of {n} prototypes in dimension {dim} after {budget} draws"
            )
        draws += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) < separation for p in protos):
            protos.append(v)
    return np.stack(protos)


def _noisy(protos: np.ndarray, labels: np.ndarray, sigma: float, rng) -> np.ndarray:
    x = protos[labels] + sigma * rng.normal(size=(labels.size, protos.shape[1]))
    return l2_normalize(x)


def _quantize(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _make_rows(cfg: SyntheticConfig, protos: np.ndarray, rng: np.random.Generator):
    labels, splits = [], []
    for code, count in ((0, cfg.n_train), (1, cfg.n_val), (2, cfg.n_test)):
        for c in range(cfg.n_classes):
            labels.extend([c] * count)
            splits.extend([code] * count)
    labels = np.array(labels, dtype=np.int64)
    splits = np.array(splits, dtype=np.uint8)
    return _quantize(_noisy(protos, labels, cfg.sigma, rng)), labels, splits


def pretrain_token_table(
    enc: FrozenTextEncoder,
    template,
    classes: list,
    prototypes: np.ndarray,
    cfg: SyntheticConfig,
    rng: np.random.Generator,
):
    """Fit the token table so manual-prompt class texts align with image features.

    Each step draws one fresh image feature per class from ``prototypes`` and
    minimizes the symmetric contrastive loss against the class texts; only the
    token table moves. Returns the new encoder and the per-step loss curve.
    """
    template = np.asarray(template, dtype=np.int64)
    opt = OptimizerConfig(kind="adamw", lr=cfg.pretrain_lr, weight_decay=0.0, epochs=1)
    table = enc.token_table.copy()
    state = OptimizerState()
    labels = np.arange(len(classes))
    losses = []
    for step in range(cfg.pretrain_steps):
        images = _noisy(prototypes, labels, cfg.sigma, rng)
        with ad.GradientTape() as tape:
            t = tape.watch(table)
            prompt = ad.take_rows(t, template)
            texts = encode_batch(enc, prompt, classes, table=t)
            sims = ad.mul(ad.matmul(images, ad.transpose(texts)), 1.0 / cfg.temperature)
            loss = ad.add(
                ad.cross_entropy(sims, labels, "sum"),
                ad.cross_entropy(ad.transpose(sims), labels, "sum"),
            )
            (grad,) = tape.gradient(loss, [t])
        losses.append(float(loss.value))
        lr = cosine_lr(opt.lr, step, max(cfg.pretrain_steps, 1))
        table, state = adamw_step(table, grad, state, opt, lr)
    return enc.with_token_table(table), losses


def _world(cfg: SyntheticConfig, n_tasks: int):
    """Prototypes and shifted pretraining-domain prototypes for each task."""
    protos, pre_protos = [], []
    shared = substream(cfg.seed, "domain-shift", "shared").normal(size=cfg.dim)
    shared *= cfg.domain_shift / np.linalg.norm(shared)
    for task in range(n_tasks):
        p = sample_prototypes(
            cfg.n_classes,
            cfg.dim,
            cfg.separation,
            substream(cfg.seed, "prototypes", task),
            cfg.rejection_budget,
        )
        jitter = substream(cfg.seed, "domain-shift", task).normal(size=p.shape)
        shifted = l2_normalize(p + shared + cfg.class_jitter * jitter / np.sqrt(cfg.dim))
        protos.append(p)
        pre_protos.append(shifted)
    return protos, pre_protos


def generate_suite(cfg: SyntheticConfig, n_tasks: int = 1, name: str = "synth"):
    """Generate ``n_tasks`` datasets that share one frozen encoder.

    Task ``t`` uses class token sequences offset by ``t * n_classes``. In
    pretrained mode the encoder's token table is fitted on pairs from every
    task's pretraining domain (prototypes perturbed by ``domain_shift``).
    """
    if n_tasks < 1:
        raise ValidationError("need at least one task")
    enc = FrozenTextEncoder.from_config(cfg.encoder_config())
    protos, pre_protos = _world(cfg, n_tasks)
    all_classes = class_token_sequences(cfg.n_classes * n_tasks, cfg.vocab_size)
    task_classes = [
        [
            ClassTokenSequence(i, all_classes[t * cfg.n_classes + i].tokens)
            for i in range(cfg.n_classes)
        ]
        for t in range(n_tasks)
    ]
    pretrain_losses = []
    if cfg.mode == "pretrained":
        enc, pretrain_losses = pretrain_token_table(
            enc,
            cfg.template,
            all_classes,
            np.concatenate(pre_protos),
            cfg,
            substream(cfg.seed, "pretrain"),
        )
    datasets = []
    for t in range(n_tasks):
        feats, labels, splits = _make_rows(cfg, protos[t], substream(cfg.seed, "features", t))
        datasets.append(
            FewShotDataset(
                name=f"{name}-t{t}" if n_tasks > 1 else name,
                n_classes=cfg.n_classes,
                classes=task_classes[t],
                features=feats,
                labels=labels,
                splits=splits,
                provenance=f"synthetic-{cfg.mode}",
                seed=cfg.seed,
                generator={
                    "config": cfg.to_dict(),
                    "n_tasks": n_tasks,
                    "task": t,
                    "encoder_checksum": enc.checksum(),
                },
            )
        )
    return datasets, enc, pretrain_losses


def generate_synthetic(cfg: SyntheticConfig, name: str = "synth"):
    datasets, enc, _ = generate_suite(cfg, 1, name)
    return datasets[0], enc


@lru_cache(maxsize=8)
def _cached_suite_encoder(cfg: SyntheticConfig, n_tasks: int) -> FrozenTextEncoder:
    return generate_suite(cfg, n_tasks)[1]


def encoder_for(dataset: FewShotDataset, encoder_config: EncoderConfig | None = None) -> FrozenTextEncoder:
    """Regenerate the (possibly pretrained) encoder a dataset was produced with."""
    gen = dataset.generator or {}
    if "config" not in gen:
        return FrozenTextEncoder.from_config(encoder_config or EncoderConfig(embed_dim=dataset.dim))
    cfg = SyntheticConfig(**gen["config"])
    enc = _cached_suite_encoder(cfg, int(gen.get("n_tasks", 1)))
    expected = gen.get("encoder_checksum")
    if expected and enc.checksum() != expected:
        raise IncompatibleEncoder(
            f"regenerated encoder checksum {enc.checksum()} != recorded {expected}"
        )
    return enc


def template_tokens(dataset: FewShotDataset) -> tuple:
    cfg = (dataset.generator or {}).get("config", {})
    return tuple(cfg.get("template", DEFAULT_TEMPLATE))


def zero_shot_prompt(dataset: FewShotDataset, enc: FrozenTextEncoder):
    return manual_prompt(enc, template_tokens(dataset))


# -- few-shot sampling ------------------------------------------------------------


def sample_few_shot(dataset: FewShotDataset, spec: EpisodeSpec):
    """K train rows per class, class-major, each class's picks in row order.

    Returns ``(features, labels, rows)`` with features re-normalized in 64-bit.
    """
    rows = dataset.split_rows("train")
    picked = []
    for c in range(dataset.n_classes):
        cls_rows = rows[dataset.labels[rows] == c]
        if cls_rows.size < spec.shots:
            raise InsufficientShots(c, int(cls_rows.size), spec.shots)
        rng = substream(spec.seed, "sampler", c)
        choice = rng.choice(cls_rows.size, size=spec.shots, replace=False)
        picked.append(np.sort(cls_rows[choice]))
    sel = np.concatenate(picked)
    return l2_normalize(dataset.features[sel]), dataset.labels[sel].copy(), sel


# -- files -----------------------------------------------------------------------


def features_to_bytes(dataset: FewShotDataset) -> bytes:
    n, d = dataset.features.shape
    return (
        _DATA_HEADER.pack(DATA_MAGIC, DATA_VERSION, n, d)
        + np.ascontiguousarray(dataset.features, dtype="<f4").tobytes()
        + np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes()
        + np.ascontiguousarray(dataset.splits, dtype="u1").tobytes()
    )


def _manifest(dataset: FewShotDataset, blob: bytes) -> dict:
    return {
        "name": dataset.name,
        "N": dataset.n_classes,
        "d": dataset.dim,
        "rows": int(dataset.features.shape[0]),
        "counts": dataset.counts(),
        "classes": [list(c.tokens) for c in dataset.classes],
        "provenance": dataset.provenance,
        "seed": dataset.seed,
        "generator": dataset.generator,
        "features_crc32": zlib.crc32(blob),
    }


def save_dataset(dataset: FewShotDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    blob = features_to_bytes(dataset)
    (out / FEATURES_FILE).write_bytes(blob)
    manifest = _manifest(dataset, blob)
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(directory) -> FewShotDataset:
    src = Path(directory)
    try:
        manifest = json.loads((src / MANIFEST_FILE).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing {MANIFEST_FILE} in {src}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    try:
        blob = (src / FEATURES_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing {FEATURES_FILE} in {src}") from exc
    if len(blob) < _DATA_HEADER.size:
        raise FormatError("features file truncated: header incomplete")
    magic, version, n, d = _DATA_HEADER.unpack_from(blob, 0)
    if magic != DATA_MAGIC:
        raise FormatError(f"bad features magic {magic!r}")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported features version {version}")
    expected = _DATA_HEADER.size + n * d * 4 + n * 4 + n
    if len(blob) != expected:
        raise FormatError(f"features file has {len(blob)} bytes, header implies {expected}")
    if zlib.crc32(blob) != manifest.get("features_crc32"):
        raise ChecksumMismatch("features file CRC32 disagrees with manifest")
    if manifest.get("rows") != n or manifest.get("d") != d:
        raise ManifestMismatch(
            f"manifest says {manifest.get('rows')} x {manifest.get('d')}, file holds {n} x {d}"
        )
    off = _DATA_HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += n * d * 4
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off)
    off += n * 4
    splits = np.frombuffer(blob, dtype="u1", count=n, offset=off)
    classes = [ClassTokenSequence(i, tuple(t)) for i, t in enumerate(manifest["classes"])]
    ds = FewShotDataset(
        name=manifest["name"],
        n_classes=int(manifest["N"]),
        classes=classes,
        features=feats.astype(np.float64),
        labels=labels.astype(np.int64),
        splits=splits.copy(),
        provenance=manifest["provenance"],
        seed=int(manifest.get("seed", 0)),
        generator=manifest.get("generator") or {},
    )
    if ds.counts() != manifest.get("counts"):
        raise ManifestMismatch("per-split class counts disagree with manifest")
    return ds


def check_shared_encoder(datasets) -> None:
    if not datasets:
        raise ValidationError("no datasets given")
    keys = {
        json.dumps(
            {k: v for k, v in (d.generator or {}).items() if k != "task"}, sort_keys=True
        )
        for d in datasets
    }
    if len(keys) > 1:
        raise IncompatibleEncoder("datasets were generated with different encoders")


def with_name(dataset: FewShotDataset, name: str) -> FewShotDataset:
    return replace(dataset, name=name)
