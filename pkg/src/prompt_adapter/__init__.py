"""Few-shot classification with a key-value cache fused with learned-prompt text logits."""

from .cache import AdapterHyperparams, CacheModel, affinity, build_cache, cache_logits, load_cache, save_cache
from .data import (
    EpisodeSpec,
    FewShotDataset,
    SyntheticConfig,
    generate_suite,
    generate_synthetic,
    load_dataset,
    sample_few_shot,
    save_dataset,
)
from .encoder import EncoderConfig, FrozenTextEncoder, PromptContext, build_classifier_weights
from .errors import PromptAdapterError, ValidationError
from .fusion import LogitBatch, clip_logits, final_logits, predict
from .harness import MethodSpec, ResultRow, run_cell, run_experiment, sweep_alpha_beta
from .numerics import contrastive_losses, cross_entropy, l2_normalize

__version__ = "0.1.0"

__all__ = [
    "AdapterHyperparams",
    "CacheModel",
    "EncoderConfig",
    "EpisodeSpec",
    "FewShotDataset",
    "FrozenTextEncoder",
    "LogitBatch",
    "MethodSpec",
    "PromptAdapterError",
    "PromptContext",
    "ResultRow",
    "SyntheticConfig",
    "ValidationError",
    "affinity",
    "build_cache",
    "build_classifier_weights",
    "cache_logits",
    "clip_logits",
    "contrastive_losses",
    "cross_entropy",
    "final_logits",
    "generate_suite",
    "generate_synthetic",
    "l2_normalize",
    "load_cache",
    "load_dataset",
    "predict",
    "run_cell",
    "run_experiment",
    "sample_few_shot",
    "save_cache",
    "save_dataset",
    "sweep_alpha_beta",
]
