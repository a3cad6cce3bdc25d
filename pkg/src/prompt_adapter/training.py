"""Training procedures: prompt tuning, cache-key tuning, separate/joint
strategies, and multi-task prompt initialization.

Parameters are updated in place on the :class:`PromptContext` /
:class:`CacheModel` handed in; each procedure returns a :class:`TrainReport`.
When validation data is supplied the best-scoring epoch's parameters are kept.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .cache import AdapterHyperparams, CacheModel, cache_logits, cache_logits_tensor
from .encoder import (
    FrozenTextEncoder,
    PromptContext,
    array_checksum,
    build_classifier_weights,
    encode_batch,
)
from .errors import EmptySplit, EmptyTaskList, IncompatibleEncoder, NotLearnable, ValidationError
from .fusion import predict
from .optim import OptimizerConfig, OptimizerState, optimizer_step, scheduled_lr
from .rng import substream


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float | None
    lr: float
    phase: str = ""


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    step_lrs: list = field(default_factory=list)
    seconds: float = 0.0
    final_checksums: dict = field(default_factory=dict)
    config_hash: str = ""
    best_epoch: int | None = None

    @property
    def losses(self) -> list:
        return [e.loss for e in self.epochs]

    def __add__(self, other: "TrainReport") -> "TrainReport":
        return TrainReport(
            epochs=self.epochs + other.epochs,
            step_lrs=self.step_lrs + other.step_lrs,
            seconds=self.seconds + other.seconds,
            final_checksums={**self.final_checksums, **other.final_checksums},
            config_hash=self.config_hash or other.config_hash,
            best_epoch=other.best_epoch,
        )

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "per_epoch": [
                {"epoch": e.epoch, "phase": e.phase, "loss": e.loss, "val_acc": e.val_acc, "lr": e.lr}
                for e in self.epochs
            ],
            "final_checksums": self.final_checksums,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    order = substream(seed, "shuffle", epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(logits) == labels))


def _check_split(x, y, what: str = "train"):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySplit(f"{what} split is empty")
    if y.shape != (x.shape[0],):
        raise ValidationError(f"{what} labels do not match features")
    return x, y


class _Loop:
    """Shared epoch/step bookkeeping with best-epoch retention."""

    def __init__(self, opt: OptimizerConfig, n: int, phase: str, config_hash: str):
        self.opt = opt
        self.n = n
        self.steps_per_epoch = math.ceil(n / opt.batch_size)
        self.total = max(1, opt.epochs * self.steps_per_epoch)
        self.report = TrainReport(config_hash=config_hash)
        self.phase = phase
        self.best_acc = -1.0
        self.best_params = None
        self._t0 = time.perf_counter()

    def lr(self, step: int) -> float:
        lr = scheduled_lr(self.opt, step, self.total)
        self.report.step_lrs.append(lr)
        return lr

    def end_epoch(self, epoch: int, losses: list, first_lr: float, val_acc, params):
        self.report.epochs.append(
            EpochRecord(epoch, float(np.mean(losses)), val_acc, first_lr, self.phase)
        )
        if val_acc is not None and val_acc > self.best_acc:
            self.best_acc = val_acc
            self.best_params = [p.copy() for p in params]
            self.report.best_epoch = epoch

    def finish(self, params):
        self.report.seconds = time.perf_counter() - self._t0
        if self.best_params is not None:
            return self.best_params
        return params


def prompt_loss(enc, p, classes, x, y, scale, reduction="mean"):
    """Cross entropy of the clip logits, differentiable in the prompt."""
    weights = encode_batch(enc, p, classes)
    logits = ad.mul(ad.matmul(x, ad.transpose(weights)), scale)
    return ad.cross_entropy(logits, y, reduction)


def train_prompt(
    enc: FrozenTextEncoder,
    prompt: PromptContext,
    train,
    classes: Sequence,
    opt: OptimizerConfig,
    val=None,
    logit_scale: float = 1.0,
    config_hash: str = "",
    reduction: str = "mean",
) -> TrainReport:
    """Tune prompt vectors by cross entropy of clip logits on ``train = (x, y)``."""
    if not prompt.learnable:
        raise NotLearnable("prompt is frozen")
    x, y = _check_split(*train)
    loop = _Loop(opt, x.shape[0], "prompt", config_hash)
    params = prompt.vectors.copy()
    state = OptimizerState()
    step = 0
    for epoch in range(opt.epochs):
        losses, first_lr = [], None
        for idx in epoch_batches(x.shape[0], opt.batch_size, opt.seed, epoch):
            with ad.GradientTape() as tape:
                p = tape.watch(params)
                loss = prompt_loss(enc, p, classes, x[idx], y[idx], logit_scale, reduction)
                (grad,) = tape.gradient(loss, [p])
            lr = loop.lr(step)
            first_lr = lr if first_lr is None else first_lr
            params, state = optimizer_step(params, grad, state, opt, lr)
            losses.append(float(loss.value))
            step += 1
        val_acc = None
        if val is not None:
            w = build_classifier_weights(enc, PromptContext(params), classes)
            val_acc = _accuracy(logit_scale * (val[0] @ w.T), val[1])
        loop.end_epoch(epoch, losses, first_lr, val_acc, [params])
    if opt.epochs:
        (params,) = loop.finish([params])
        prompt.vectors = params
    loop.report.final_checksums = {"prompt": prompt.checksum(), "encoder": enc.checksum()}
    return loop.report


def _final_logits_tensor(x, keys, cache: CacheModel, hp: AdapterHyperparams, clip):
    g_cache = cache_logits_tensor(x, keys, cache.values, hp.beta)
    return ad.add(ad.mul(g_cache, hp.alpha), clip)


def cache_key_loss(x, keys, cache: CacheModel, hp: AdapterHyperparams, clip, y, reduction="mean"):
    """Cross entropy of the fused logits, differentiable in the cache keys."""
    return ad.cross_entropy(_final_logits_tensor(x, keys, cache, hp, clip), y, reduction)


def _renormalized(keys: np.ndarray) -> np.ndarray:
    return keys / np.linalg.norm(keys, axis=1, keepdims=True)


def train_cache_keys(
    cache: CacheModel,
    prompt: PromptContext,
    enc: FrozenTextEncoder,
    train,
    classes: Sequence,
    hp: AdapterHyperparams,
    opt: OptimizerConfig,
    val=None,
    logit_scale: float = 1.0,
    config_hash: str = "",
    reduction: str = "mean",
) -> TrainReport:
    """Tune cache keys by cross entropy of the fused logits; values and prompt stay fixed."""
    if not cache.learnable:
        raise NotLearnable("cache keys are frozen")
    if prompt.learnable:
        raise ValidationError("freeze the prompt before tuning cache keys")
    x, y = _check_split(*train)
    weights = build_classifier_weights(enc, prompt, classes)
    clip_train = logit_scale * (x @ weights.T)
    clip_val = None if val is None else logit_scale * (val[0] @ weights.T)
    loop = _Loop(opt, x.shape[0], "cache", config_hash)
    keys = cache.keys.copy()
    state = OptimizerState()
    step = 0
    for epoch in range(opt.epochs):
        losses, first_lr = [], None
        for idx in epoch_batches(x.shape[0], opt.batch_size, opt.seed, epoch):
            with ad.GradientTape() as tape:
                k = tape.watch(keys)
                loss = cache_key_loss(x[idx], k, cache, hp, clip_train[idx], y[idx], reduction)
                (grad,) = tape.gradient(loss, [k])
            lr = loop.lr(step)
            first_lr = lr if first_lr is None else first_lr
            keys, state = optimizer_step(keys, grad, state, opt, lr)
            if cache.renormalize:
                keys = _renormalized(keys)
            losses.append(float(loss.value))
            step += 1
        val_acc = None
        if val is not None:
            probe = CacheModel(keys, cache.labels, cache.n_classes, cache.shots)
            val_acc = _accuracy(hp.alpha * cache_logits(val[0], probe, hp.beta) + clip_val, val[1])
        loop.end_epoch(epoch, losses, first_lr, val_acc, [keys])
    if opt.epochs:
        (keys,) = loop.finish([keys])
        cache.keys = keys
    loop.report.final_checksums = {
        "cache_keys": array_checksum(cache.keys),
        "prompt": prompt.checksum(),
        "encoder": enc.checksum(),
    }
    return loop.report


def train_separate(
    enc: FrozenTextEncoder,
    prompt: PromptContext,
    cache: CacheModel,
    train,
    classes: Sequence,
    hp: AdapterHyperparams,
    opt_prompt: OptimizerConfig,
    opt_cache: OptimizerConfig,
    val=None,
    logit_scale: float = 1.0,
    retune: Callable[[PromptContext], AdapterHyperparams] | None = None,
    config_hash: str = "",
    prompt_scale: float | None = None,
    reduction: str = "mean",
) -> TrainReport:
    """Tune the prompt, freeze it, then tune the cache keys.

    ``retune``, if given, picks fresh hyperparameters for the cache phase from
    the frozen prompt (e.g. a validation sweep). ``prompt_scale`` overrides the
    clip-logit scale of the prompt phase only.
    """
    scale = logit_scale if prompt_scale is None else prompt_scale
    first = train_prompt(enc, prompt, train, classes, opt_prompt, val, scale, config_hash, reduction)
    prompt.learnable = False
    if retune is not None:
        hp = retune(prompt)
    second = train_cache_keys(
        cache, prompt, enc, train, classes, hp, opt_cache, val, logit_scale, config_hash, reduction
    )
    return first + second


def train_joint(
    enc: FrozenTextEncoder,
    prompt: PromptContext,
    cache: CacheModel,
    train,
    classes: Sequence,
    hp: AdapterHyperparams,
    opt: OptimizerConfig,
    val=None,
    logit_scale: float = 1.0,
    config_hash: str = "",
    reduction: str = "mean",
) -> TrainReport:
    """Tune prompt and cache keys together through the fused-logit loss."""
    if not prompt.learnable:
        raise NotLearnable("prompt is frozen")
    if not cache.learnable:
        raise NotLearnable("cache keys are frozen")
    x, y = _check_split(*train)
    loop = _Loop(opt, x.shape[0], "joint", config_hash)
    params, keys = prompt.vectors.copy(), cache.keys.copy()
    p_state, k_state = OptimizerState(), OptimizerState()
    step = 0
    for epoch in range(opt.epochs):
        losses, first_lr = [], None
        for idx in epoch_batches(x.shape[0], opt.batch_size, opt.seed, epoch):
            with ad.GradientTape() as tape:
                p = tape.watch(params)
                k = tape.watch(keys)
                loss = joint_loss(enc, p, k, cache, classes, x[idx], y[idx], hp, logit_scale, reduction)
                g_p, g_k = tape.gradient(loss, [p, k])
            lr = loop.lr(step)
            first_lr = lr if first_lr is None else first_lr
            params, p_state = optimizer_step(params, g_p, p_state, opt, lr)
            keys, k_state = optimizer_step(keys, g_k, k_state, opt, lr)
            if cache.renormalize:
                keys = _renormalized(keys)
            losses.append(float(loss.value))
            step += 1
        val_acc = None
        if val is not None:
            w = build_classifier_weights(enc, PromptContext(params), classes)
            probe = CacheModel(keys, cache.labels, cache.n_classes, cache.shots)
            logits = hp.alpha * cache_logits(val[0], probe, hp.beta) + logit_scale * (val[0] @ w.T)
            val_acc = _accuracy(logits, val[1])
        loop.end_epoch(epoch, losses, first_lr, val_acc, [params, keys])
    if opt.epochs:
        params, keys = loop.finish([params, keys])
        prompt.vectors, cache.keys = params, keys
    loop.report.final_checksums = {
        "prompt": prompt.checksum(),
        "cache_keys": array_checksum(cache.keys),
        "encoder": enc.checksum(),
    }
    return loop.report


def joint_loss(enc, p, k, cache, classes, x, y, hp, logit_scale, reduction="mean"):
    """Cross entropy of the fused logits, differentiable in prompt and keys."""
    weights = encode_batch(enc, p, classes)
    clip = ad.mul(ad.matmul(x, ad.transpose(weights)), logit_scale)
    return ad.cross_entropy(_final_logits_tensor(x, k, cache, hp, clip), y, reduction)


@dataclass
class TaskData:
    features: np.ndarray
    labels: np.ndarray
    classes: list


def multitask_loss(enc, p, tasks: Sequence[TaskData], batches, weights, logit_scale, reduction="mean"):
    total = None
    for task, idx, w in zip(tasks, batches, weights):
        term = ad.mul(
            prompt_loss(enc, p, task.classes, task.features[idx], task.labels[idx], logit_scale, reduction), w
        )
        total = term if total is None else ad.add(total, term)
    return total


def multitask_pretrain_prompt(
    enc: FrozenTextEncoder,
    prompt: PromptContext,
    tasks: Sequence[TaskData],
    opt: OptimizerConfig,
    task_weights: Sequence[float] | None = None,
    logit_scale: float = 1.0,
    reduction: str = "mean",
) -> PromptContext:
    """Learn one prompt shared by several tasks; returns it as a new context.

    Every step takes one minibatch from each task and minimizes the weighted
    mean (uniform by default) of the per-task clip-logit cross entropies.
    Tasks with fewer batches per epoch cycle through theirs again.
    """
    if not tasks:
        raise EmptyTaskList("multi-task initialization needs at least one task")
    for t in tasks:
        if np.shape(t.features)[1] != enc.config.embed_dim:
            raise IncompatibleEncoder(
                f"task feature dim {np.shape(t.features)[1]} != encoder dim {enc.config.embed_dim}"
            )
        _check_split(t.features, t.labels)
    if prompt.vectors.shape[1] != enc.config.token_dim:
        raise IncompatibleEncoder("prompt width does not match the encoder token dimension")
    if task_weights is None:
        task_weights = [1.0 / len(tasks)] * len(tasks)
    if len(task_weights) != len(tasks):
        raise ValidationError("one weight per task is required")
    sizes = [len(t.labels) for t in tasks]
    steps_per_epoch = max(math.ceil(n / opt.batch_size) for n in sizes)
    total = max(1, opt.epochs * steps_per_epoch)
    params = prompt.vectors.copy()
    state = OptimizerState()
    step = 0
    for epoch in range(opt.epochs):
        per_task = [epoch_batches(n, opt.batch_size, opt.seed, epoch) for n in sizes]
        for j in range(steps_per_epoch):
            batches = [b[j % len(b)] for b in per_task]
            with ad.GradientTape() as tape:
                p = tape.watch(params)
                loss = multitask_loss(enc, p, tasks, batches, task_weights, logit_scale, reduction)
                (grad,) = tape.gradient(loss, [p])
            params, state = optimizer_step(params, grad, state, opt, scheduled_lr(opt, step, total))
            step += 1
    return PromptContext(params, learnable=True)
