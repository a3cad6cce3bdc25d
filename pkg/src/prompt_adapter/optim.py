"""Functional SGD/AdamW updates and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeMismatch, ValidationError


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.002
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 50
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.kind not in ("sgd", "adamw"):
            raise ValidationError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# Reference defaults: prompt tuning uses SGD (lr 0.002, batch 32, cosine);
# cache-key tuning uses AdamW (lr 0.001, batch 256, cosine, 20 epochs).
PROMPT_SGD = OptimizerConfig(kind="sgd", lr=0.002, batch_size=32, epochs=50)
CACHE_ADAMW = OptimizerConfig(kind="adamw", lr=0.001, batch_size=256, epochs=20)


def prompt_epochs_for_shots(shots: int) -> int:
    if shots >= 8:
        return 200
    if shots >= 2:
        return 100
    return 50


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict = field(default_factory=dict)


def cosine_lr(base_lr: float, t: int, total: int) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValidationError(f"need 0 <= t <= T with T >= 1, got t={t}, T={total}")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total))


def scheduled_lr(cfg: OptimizerConfig, t: int, total: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return cosine_lr(cfg.lr, t, total)


def _check(params: np.ndarray, grads: np.ndarray) -> None:
    if np.shape(params) != np.shape(grads):
        raise ShapeMismatch(f"param shape {np.shape(params)} != grad shape {np.shape(grads)}")


def sgd_step(params, grads, state: OptimizerState, cfg: OptimizerConfig, lr: float):
    """Heavy-ball SGD: ``v <- mu*v + g; p <- p - lr*v``."""
    _check(params, grads)
    v = state.buffers.get("momentum")
    v = grads.copy() if v is None else cfg.momentum * v + grads
    new_state = OptimizerState(state.step + 1, {"momentum": v})
    return params - lr * v, new_state


def adamw_step(params, grads, state: OptimizerState, cfg: OptimizerConfig, lr: float):
    """Adam with bias correction and decoupled weight decay."""
    _check(params, grads)
    b1, b2 = cfg.betas
    m = state.buffers.get("m", np.zeros_like(params))
    v = state.buffers.get("v", np.zeros_like(params))
    t = state.step + 1
    m = b1 * m + (1.0 - b1) * grads
    v = b2 * v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    p = params * (1.0 - lr * cfg.weight_decay) if cfg.weight_decay else params
    p = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return p, OptimizerState(t, {"m": m, "v": v})


def optimizer_step(params, grads, state, cfg: OptimizerConfig, lr: float):
    if cfg.kind == "adamw":
        return adamw_step(params, grads, state, cfg, lr)
    return sgd_step(params, grads, state, cfg, lr)
