"""Methods, metrics, hyperparameter sweeps and the experiment grid."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache import AdapterHyperparams, CacheModel, build_cache, cache_logits
from .data import (
    EpisodeSpec,
    FewShotDataset,
    encoder_for,
    sample_few_shot,
    zero_shot_prompt,
)
from .encoder import PromptContext, build_classifier_weights, random_prompt
from .errors import EmptyGrid, EmptyInput, LengthMismatch, ValidationError
from .fusion import predict
from .numerics import one_hot_matrix
from .optim import (
    CACHE_ADAMW,
    PROMPT_SGD,
    OptimizerConfig,
    OptimizerState,
    optimizer_step,
    prompt_epochs_for_shots,
    scheduled_lr,
)
from .rng import substream
from .training import (
    TaskData,
    multitask_pretrain_prompt,
    train_cache_keys,
    train_joint,
    train_prompt,
    train_separate,
)

METHOD_KINDS = (
    "zero_shot",
    "linear_probe",
    "tip_adapter",
    "tip_adapter_f",
    "prompt_adapter",
    "prompt_adapter_f",
)
PROMPT_INITS = ("manual", "random", "pretrained-multitask")
STRATEGIES = ("none", "separate", "joint")
DEFAULT_ALPHAS = tuple(0.5 * i for i in range(1, 11))
DEFAULT_BETAS = tuple(float(b) for b in range(1, 11))
PROBE_GD = OptimizerConfig(kind="sgd", lr=1.0, momentum=0.9, batch_size=1, epochs=300, schedule="constant")
MULTITASK_SGD = replace(PROMPT_SGD, epochs=100)
RESULT_FIELDS = (
    "dataset",
    "method",
    "prompt_init",
    "strategy",
    "shots",
    "seed",
    "alpha",
    "beta",
    "accuracy",
    "seconds",
)


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    prompt_init: str = "manual"
    strategy: str = "none"
    logit_scale: float = 1.0
    train_scale: float | None = None
    prompt_length: int = 4
    loss_reduction: str = "mean"
    alphas: tuple = DEFAULT_ALPHAS
    betas: tuple = DEFAULT_BETAS
    prompt_opt: OptimizerConfig | None = None
    prompt_epochs: int | None = None
    cache_opt: OptimizerConfig = CACHE_ADAMW
    joint_opt: OptimizerConfig | None = None
    multitask_opt: OptimizerConfig = MULTITASK_SGD
    probe_opt: OptimizerConfig = PROBE_GD

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.kind not in METHOD_KINDS:
            raise ValidationError(f"unknown method kind {self.kind!r}")
        if self.prompt_init not in PROMPT_INITS:
            raise ValidationError(f"unknown prompt init {self.prompt_init!r}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown training strategy {self.strategy!r}")
        if self.kind == "prompt_adapter_f":
            if self.strategy == "none":
                raise ValidationError("prompt_adapter_f needs a separate or joint strategy")
        elif self.strategy != "none":
            raise ValidationError(f"{self.kind} does not take a training strategy")
        if self.kind in ("zero_shot", "linear_probe", "tip_adapter", "tip_adapter_f"):
            if self.prompt_init != "manual":
                raise ValidationError(f"{self.kind} always uses the hand-crafted prompt")
        if not self.logit_scale > 0:
            raise ValidationError("logit scale must be positive")
        if self.train_scale is not None and not self.train_scale > 0:
            raise ValidationError("training logit scale must be positive")
        if self.prompt_epochs is not None and self.prompt_epochs < 0:
            raise ValidationError("prompt epochs must be >= 0")
        if self.prompt_length < 1:
            raise ValidationError("prompt length must be >= 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValidationError(f"unknown loss reduction {self.loss_reduction!r}")

    @property
    def prompt_scale(self) -> float:
        """Clip-logit scale inside the prompt-only cross entropy."""
        return self.logit_scale if self.train_scale is None else self.train_scale

    @property
    def uses_cache(self) -> bool:
        return self.kind in ("tip_adapter", "tip_adapter_f", "prompt_adapter", "prompt_adapter_f")

    @property
    def tunes_prompt(self) -> bool:
        return self.kind in ("prompt_adapter", "prompt_adapter_f")

    @property
    def label(self) -> str:
        parts = [self.kind]
        if self.tunes_prompt:
            parts.append(self.prompt_init)
        if self.strategy != "none":
            parts.append(self.strategy)
        return "/".join(parts)

    def prompt_opt_for(self, shots: int, seed: int) -> OptimizerConfig:
        """Prompt optimizer for one cell.

        The epoch count is ``prompt_epochs`` when set and otherwise follows the
        shot-dependent schedule; the ``epochs`` field of ``prompt_opt`` is unused.
        """
        epochs = prompt_epochs_for_shots(shots) if self.prompt_epochs is None else self.prompt_epochs
        base = replace(self.prompt_opt or PROMPT_SGD, epochs=epochs)
        return replace(base, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("prompt_opt", "cache_opt", "joint_opt", "multitask_opt", "probe_opt"):
            opt = getattr(self, key)
            d[key] = None if opt is None else opt.to_dict()
        d["alphas"] = list(self.alphas)
        d["betas"] = list(self.betas)
        return d


@dataclass
class ResultRow:
    dataset: str
    method: str
    prompt_init: str
    strategy: str
    shots: int
    seed: int
    alpha: float | None
    beta: float | None
    accuracy: float
    seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def key(self) -> tuple:
        return (self.dataset, self.method, self.prompt_init, self.strategy, int(self.shots), int(self.seed))

    def to_csv(self) -> dict:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return {
            "dataset": self.dataset,
            "method": self.method,
            "prompt_init": self.prompt_init,
            "strategy": self.strategy,
            "shots": str(self.shots),
            "seed": str(self.seed),
            "alpha": fmt(self.alpha),
            "beta": fmt(self.beta),
            "accuracy": repr(float(self.accuracy)),
            "seconds": f"{self.seconds:.3f}",
        }

    @classmethod
    def from_csv(cls, rec: dict) -> "ResultRow":
        def opt(v):
            return None if v in ("", None) else float(v)

        return cls(
            dataset=rec["dataset"],
            method=rec["method"],
            prompt_init=rec["prompt_init"],
            strategy=rec["strategy"],
            shots=int(rec["shots"]),
            seed=int(rec["seed"]),
            alpha=opt(rec["alpha"]),
            beta=opt(rec["beta"]),
            accuracy=float(rec["accuracy"]),
            seconds=float(rec.get("seconds") or 0.0),
        )


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise EmptyInput("accuracy of an empty prediction set")
    return float(np.mean(p == y))


# -- sweep -------------------------------------------------------------------


@dataclass
class SweepResult:
    alpha: float
    beta: float
    accuracy: float
    surface: list = field(default_factory=list)  # (alpha, beta, val_accuracy)

    @property
    def hyperparams(self) -> AdapterHyperparams:
        return AdapterHyperparams(self.alpha, self.beta)

    def surface_csv(self) -> str:
        lines = ["alpha,beta,val_accuracy"]
        lines += [f"{a!r},{b!r},{acc!r}" for a, b, acc in self.surface]
        return "\n".join(lines) + "\n"


def sweep_alpha_beta(clip_val, cache: CacheModel, val_features, val_labels, alphas, betas) -> SweepResult:
    """Exhaustive validation search over the alpha x beta grid.

    ``clip_val`` holds the clip logits of the validation features. Ties keep
    the smallest alpha, then the smallest beta.
    """
    alphas = sorted(float(a) for a in alphas)
    betas = sorted(float(b) for b in betas)
    if not alphas or not betas:
        raise EmptyGrid("alpha and beta grids must be non-empty")
    clip_val = np.asarray(getattr(clip_val, "values", clip_val), dtype=np.float64)
    sims = np.asarray(val_features, dtype=np.float64) @ cache.keys.T
    values = cache.values
    acc = np.empty((len(alphas), len(betas)))
    for j, beta in enumerate(betas):
        g_cache = np.exp(-beta * (1.0 - sims)) @ values
        for i, alpha in enumerate(alphas):
            acc[i, j] = accuracy(predict(alpha * g_cache + clip_val), val_labels)
    best = (0, 0)
    for i in range(len(alphas)):
        for j in range(len(betas)):
            if acc[i, j] > acc[best]:
                best = (i, j)
    surface = [(a, b, float(acc[i, j])) for i, a in enumerate(alphas) for j, b in enumerate(betas)]
    return SweepResult(alphas[best[0]], betas[best[1]], float(acc[best]), surface)


def evaluate_adapter(clip_test, cache: CacheModel, features, labels, hp: AdapterHyperparams) -> float:
    logits = hp.alpha * cache_logits(features, cache, hp.beta) + clip_test
    return accuracy(predict(logits), labels)


# -- linear probe ---------------------------------------------------------------


def fit_linear_probe(features, labels, n_classes: int, opt: OptimizerConfig = PROBE_GD):
    """Multinomial logistic regression by full-batch gradient descent from zeros."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    targets = one_hot_matrix(y, n_classes)
    params = np.zeros((x.shape[1] + 1, n_classes))
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    state = OptimizerState()
    for step in range(opt.epochs):
        z = xb @ params
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        grad = xb.T @ (probs - targets) / x.shape[0]
        params, state = optimizer_step(params, grad, state, opt, scheduled_lr(opt, step, opt.epochs))
    return params[:-1].T.copy(), params[-1].copy()


def probe_logits(weights, bias, features) -> np.ndarray:
    return np.asarray(features) @ weights.T + bias


def linear_probe(dataset: FewShotDataset, shots: int, seed: int, opt: OptimizerConfig = PROBE_GD) -> ResultRow:
    t0 = time.perf_counter()
    x, y, _ = sample_few_shot(dataset, EpisodeSpec(shots, seed))
    w, b = fit_linear_probe(x, y, dataset.n_classes, opt)
    xt, yt = dataset.split("test")
    acc = accuracy(predict(probe_logits(w, b, xt)), yt)
    return ResultRow(dataset.name, "linear_probe", "manual", "none", shots, seed, None, None, acc, time.perf_counter() - t0)


# -- method pipelines ------------------------------------------------------------


def initial_prompt(method: MethodSpec, enc, dataset: FewShotDataset, seed: int, shared: PromptContext | None = None) -> PromptContext:
    """The learnable starting prompt for a prompt-tuning method."""
    if method.prompt_init == "manual":
        return zero_shot_prompt(dataset, enc).copy(learnable=True)
    if method.prompt_init == "random":
        rng = substream(seed, "init", "prompt")
        return random_prompt(method.prompt_length, enc.config.token_dim, rng)
    if shared is None:
        raise ValidationError("pretrained-multitask init needs a shared prompt")
    return shared.copy(learnable=True)


def joint_budget(method: MethodSpec, n_train: int, shots: int, seed: int) -> OptimizerConfig:
    """Joint optimizer config whose step count matches the separate strategy's."""
    popt = method.prompt_opt_for(shots, seed)
    if method.joint_opt is not None:
        return replace(method.joint_opt, seed=seed)
    copt = method.cache_opt
    steps = popt.epochs * math.ceil(n_train / popt.batch_size) + copt.epochs * math.ceil(
        n_train / copt.batch_size
    )
    per_epoch = math.ceil(n_train / popt.batch_size)
    return replace(popt, epochs=math.ceil(steps / per_epoch))


@dataclass
class CellOutcome:
    row: ResultRow
    sweep: SweepResult | None = None
    prompt: PromptContext | None = None
    cache: CacheModel | None = None
    test_logits: np.ndarray | None = None


def run_cell(
    dataset: FewShotDataset,
    method: MethodSpec,
    shots: int,
    seed: int,
    shared_prompt: PromptContext | None = None,
    alpha_override: float | None = None,
) -> CellOutcome:
    """Execute one (dataset, method, shots, seed) cell; test is touched once."""
    t0 = time.perf_counter()
    if method.kind == "linear_probe":
        row = linear_probe(dataset, shots, seed, method.probe_opt)
        return CellOutcome(row)

    enc = encoder_for(dataset)
    classes = dataset.classes
    xv, yv = dataset.split("val")
    xt, yt = dataset.split("test")
    scale = method.logit_scale

    def row(acc, hp=None):
        return ResultRow(
            dataset.name,
            method.kind,
            method.prompt_init,
            method.strategy,
            shots,
            seed,
            None if hp is None else hp.alpha,
            None if hp is None else hp.beta,
            acc,
            time.perf_counter() - t0,
        )

    if method.kind == "zero_shot":
        prompt = zero_shot_prompt(dataset, enc)
        w = build_classifier_weights(enc, prompt, classes)
        logits = scale * (xt @ w.T)
        return CellOutcome(row(accuracy(predict(logits), yt)), prompt=prompt, test_logits=logits)

    x, y, _ = sample_few_shot(dataset, EpisodeSpec(shots, seed))
    cache = build_cache(x, y, dataset.n_classes)
    val = (xv, yv)

    if method.tunes_prompt:
        prompt = initial_prompt(method, enc, dataset, seed, shared_prompt)
    else:
        prompt = zero_shot_prompt(dataset, enc)

    def sweep_for(p: PromptContext) -> SweepResult:
        w = build_classifier_weights(enc, p, classes)
        return sweep_alpha_beta(scale * (xv @ w.T), cache, xv, yv, method.alphas, method.betas)

    if method.kind == "prompt_adapter" or (method.kind == "prompt_adapter_f" and method.strategy == "separate"):
        popt = method.prompt_opt_for(shots, seed)
        if method.kind == "prompt_adapter":
            train_prompt(enc, prompt, (x, y), classes, popt, val, method.prompt_scale, reduction=method.loss_reduction)
            prompt.learnable = False
        else:
            cache.learnable = True
            copt = replace(method.cache_opt, seed=seed)
            train_separate(
                enc, prompt, cache, (x, y), classes, AdapterHyperparams(), popt, copt, val, scale,
                retune=lambda p: sweep_for(p).hyperparams, prompt_scale=method.prompt_scale,
                reduction=method.loss_reduction,
            )
    elif method.kind == "tip_adapter_f":
        cache.learnable = True
        hp0 = sweep_for(prompt).hyperparams
        train_cache_keys(
            cache, prompt, enc, (x, y), classes, hp0, replace(method.cache_opt, seed=seed), val, scale,
            reduction=method.loss_reduction,
        )
    elif method.kind == "prompt_adapter_f" and method.strategy == "joint":
        cache.learnable = True
        hp0 = sweep_for(prompt).hyperparams
        jopt = joint_budget(method, len(y), shots, seed)
        train_joint(enc, prompt, cache, (x, y), classes, hp0, jopt, val, scale, reduction=method.loss_reduction)
        prompt.learnable = False

    sweep = sweep_for(prompt)
    hp = sweep.hyperparams
    if alpha_override is not None:
        hp = AdapterHyperparams(alpha_override, hp.beta)
    w = build_classifier_weights(enc, prompt, classes)
    clip_test = scale * (xt @ w.T)
    acc = evaluate_adapter(clip_test, cache, xt, yt, hp)
    logits = hp.alpha * cache_logits(xt, cache, hp.beta) + clip_test
    return CellOutcome(row(acc, hp), sweep=sweep, prompt=prompt, cache=cache, test_logits=logits)


# -- experiment grid ---------------------------------------------------------------


def shared_prompt_for(
    datasets: Sequence[FewShotDataset], method: MethodSpec, shots: int, seed: int
) -> PromptContext:
    """Shared prompt learned across all tasks' K-shot samples for one seed."""
    enc = encoder_for(datasets[0])
    tasks = []
    for ds in datasets:
        x, y, _ = sample_few_shot(ds, EpisodeSpec(shots, seed))
        tasks.append(TaskData(x, y, ds.classes))
    start = random_prompt(method.prompt_length, enc.config.token_dim, substream(seed, "init", "prompt"))
    opt = replace(method.multitask_opt, seed=seed)
    return multitask_pretrain_prompt(
        enc, start, tasks, opt, logit_scale=method.prompt_scale, reduction=method.loss_reduction
    )


def _encoder_group(ds: FewShotDataset) -> str:
    gen = {k: v for k, v in (ds.generator or {}).items() if k != "task"}
    return json.dumps(gen, sort_keys=True)


def _cell_job(args):
    ds, method, shots, seed, shared = args
    return run_cell(ds, method, shots, seed, shared).row


def read_rows(path) -> list:
    p = Path(path)
    if not p.exists():
        return []
    with p.open(newline="") as fh:
        return [ResultRow.from_csv(rec) for rec in csv.DictReader(fh)]


def summarize(rows: Sequence[ResultRow]) -> dict:
    """Per-cell mean/std over seeds plus per-method cross-dataset averages."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.dataset, _row_label(r), r.shots), []).append(r.accuracy)
    out_cells = []
    for (ds, label, shots), accs in sorted(cells.items()):
        a = np.array(accs)
        out_cells.append(
            {
                "dataset": ds,
                "method": label,
                "shots": shots,
                "n": int(a.size),
                "mean": float(np.mean(a)),
                "std": float(np.std(a)),
            }
        )
    averages: dict = {}
    for c in out_cells:
        averages.setdefault((c["method"], c["shots"]), []).append(c["mean"])
    out_avg = [
        {"method": m, "shots": s, "n_datasets": len(v), "mean": float(np.mean(v))}
        for (m, s), v in sorted(averages.items())
    ]
    return {"cells": out_cells, "average": out_avg}


def _row_label(r: ResultRow) -> str:
    parts = [r.method]
    if r.method in ("prompt_adapter", "prompt_adapter_f"):
        parts.append(r.prompt_init)
    if r.strategy != "none":
        parts.append(r.strategy)
    return "/".join(parts)


def write_summary(rows, path) -> dict:
    summary = summarize(rows)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_experiment(
    datasets: Sequence[FewShotDataset],
    methods: Sequence[MethodSpec],
    shots: Sequence[int],
    seeds: Sequence[int],
    out_dir=None,
    workers: int = 1,
    log=None,
):
    """Run the full dataset x method x shots x seed grid.

    With ``out_dir`` set, rows are appended to ``results.csv`` in canonical
    order as they finish, cells already present there are skipped, and
    ``summary.json`` is rewritten at the end.
    """
    csv_path = None if out_dir is None else Path(out_dir) / "results.csv"
    existing = read_rows(csv_path) if csv_path else []
    done = {r.key for r in existing}

    jobs = []
    shared_cache: dict = {}
    groups: dict = {}
    for ds in datasets:
        groups.setdefault(_encoder_group(ds), []).append(ds)
    for ds in datasets:
        for method in methods:
            for k in shots:
                for seed in seeds:
                    key = (ds.name, method.kind, method.prompt_init, method.strategy, int(k), int(seed))
                    if key in done:
                        continue
                    shared = None
                    if method.prompt_init == "pretrained-multitask":
                        mkey = (_encoder_group(ds), method, k, seed)
                        if mkey not in shared_cache:
                            shared_cache[mkey] = shared_prompt_for(groups[_encoder_group(ds)], method, k, seed)
                        shared = shared_cache[mkey]
                    jobs.append((ds, method, int(k), int(seed), shared))

    new_rows = []
    writer = None
    fh = None
    try:
        if csv_path is not None:
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not csv_path.exists() or csv_path.stat().st_size == 0
            fh = csv_path.open("a", newline="")
            writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
            if fresh:
                writer.writeheader()
                fh.flush()
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_cell_job, jobs)
                for r in results:
                    new_rows.append(r)
                    _emit(writer, fh, r, log)
        else:
            for job in jobs:
                r = _cell_job(job)
                new_rows.append(r)
                _emit(writer, fh, r, log)
    finally:
        if fh is not None:
            fh.close()
    rows = existing + new_rows
    summary = summarize(rows)
    if out_dir is not None:
        write_summary(rows, Path(out_dir) / "summary.json")
    return rows, summary


def _emit(writer, fh, row: ResultRow, log) -> None:
    if writer is not None:
        writer.writerow(row.to_csv())
        fh.flush()
    if log is not None:
        log("cell_done", **row.to_csv())
