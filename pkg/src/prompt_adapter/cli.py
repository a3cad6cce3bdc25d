"""Command-line entry point.

Every command reads an optional JSON config (``--config``) plus dotted
overrides (``--set a.b=value``); dedicated flags win over both. Outputs go to
``--out``, else ``$PAD_OUT``, else the config's output directory. Logs are
JSON lines on stderr; results go to stdout and the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .cache import AdapterHyperparams, build_cache, save_cache
from .config import ExperimentConfig
from .data import (
    EpisodeSpec,
    check_shared_encoder,
    encoder_for,
    generate_suite,
    load_dataset,
    sample_few_shot,
    save_dataset,
    zero_shot_prompt,
)
from .encoder import PromptContext, build_classifier_weights
from .errors import PromptAdapterError, ValidationError
from .training import train_joint, train_prompt, train_separate

log = logging.getLogger("prompt_adapter")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; usage errors are validation failures here.
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "event": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True, default=str)


def _setup_logging(level: str = "INFO") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _emit(event: str, **fields) -> None:
    log.info(event, extra={"fields": fields})


# -- parser -----------------------------------------------------------------------


def _common(p, seed: bool = True):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", help="output directory (default: $PAD_OUT or config output.dir)")
    if seed:
        p.add_argument("--seed", type=int, required=True)


def _cell_args(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--init", default="manual", choices=harness.PROMPT_INITS)
    p.add_argument("--prompt", help="learned prompt (.npy) used as initialization")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prompt-adapter", description="Few-shot cache + prompt adapters on embeddings.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset (or task suite)")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--mode", choices=("random", "pretrained"))
    p.add_argument("--tasks", type=int)
    p.add_argument("--name")

    p = sub.add_parser("pretrain", help="run the toy contrastive alignment and report its losses")
    _common(p)
    p.add_argument("--tasks", type=int)

    p = sub.add_parser("cache", help="cache model operations")
    csub = p.add_subparsers(dest="cache_command", required=True, parser_class=_Parser)
    b = csub.add_parser("build", help="build a cache file from a K-shot sample")
    _common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--shots", type=int, required=True)

    p = sub.add_parser("train-prompt", help="learn prompt vectors on a K-shot sample")
    _common(p)
    _cell_args(p)

    p = sub.add_parser("train", help="tune prompt and cache keys")
    _common(p)
    _cell_args(p)
    p.add_argument("--strategy", required=True, choices=("separate", "joint"))

    p = sub.add_parser("multitask-init", help="learn one prompt shared by several datasets")
    _common(p)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--shots", type=int, required=True)

    p = sub.add_parser("eval", help="evaluate one method and append its result row")
    _common(p)
    _cell_args(p)
    p.add_argument("--method", required=True, choices=harness.METHOD_KINDS)
    p.add_argument("--strategy", default="none", choices=harness.STRATEGIES)

    p = sub.add_parser("sweep", help="alpha/beta validation sweep")
    _common(p)
    _cell_args(p)

    p = sub.add_parser("grid", help="run the full experiment grid")
    _common(p)
    p.add_argument("--data", nargs="*", default=None, help="dataset directories (default: config datasets, else generate)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="aggregate an existing results CSV")
    _common(p, seed=False)
    p.add_argument("--rows", required=True, help="results CSV")
    return parser


# -- helpers ---------------------------------------------------------------------


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or os.environ.get("PAD_OUT") or cfg.output_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _flag_overrides(args) -> list:
    sets = []
    if args.command in ("gen", "pretrain"):
        for flag, key in (("classes", "n_classes"), ("dim", "dim"), ("mode", "mode"), ("tasks", "n_tasks"), ("name", "name")):
            value = getattr(args, flag, None)
            if value is not None:
                sets.append(f"data.{key}={json.dumps(value)}")
    return sets


def _load_prompt(path) -> PromptContext:
    try:
        vectors = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read prompt file {path}: {exc}") from exc
    return PromptContext(vectors, learnable=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cell_setup(args):
    ds = load_dataset(args.data)
    enc = encoder_for(ds)
    x, y, _ = sample_few_shot(ds, EpisodeSpec(args.shots, args.seed))
    return ds, enc, x, y


def _start_prompt(args, cfg, ds, enc) -> PromptContext:
    if args.prompt:
        return _load_prompt(args.prompt)
    if args.init == "pretrained-multitask":
        raise UsageError("--init pretrained-multitask needs --prompt <shared prompt .npy>")
    method = cfg.method("prompt_adapter", args.init)
    return harness.initial_prompt(method, enc, ds, args.seed)


def _append_row(path: Path, row: harness.ResultRow) -> None:
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=harness.RESULT_FIELDS, lineterminator="\n")
        if fresh:
            w.writeheader()
        w.writerow(row.to_csv())


# -- commands ----------------------------------------------------------------------


def cmd_gen(args, cfg, out):
    datasets, enc, _ = generate_suite(cfg.synthetic(args.seed), cfg.n_tasks, cfg.dataset_name)
    paths = []
    for ds in datasets:
        target = out if len(datasets) == 1 else out / ds.name
        save_dataset(ds, target)
        paths.append(str(target))
        _emit("dataset_written", path=str(target), rows=int(ds.features.shape[0]), counts=ds.counts())
    print(json.dumps({"datasets": paths, "encoder_checksum": enc.checksum()}, sort_keys=True))


def cmd_pretrain(args, cfg, out):
    _, enc, losses = generate_suite(cfg.synthetic(args.seed), cfg.n_tasks, cfg.dataset_name)
    rec = {
        "config_hash": cfg.hash,
        "seed": args.seed,
        "encoder_checksum": enc.checksum(),
        "losses": [float(v) for v in losses],
    }
    _write_json(out / "pretrain.json", rec)
    first, last = (losses[0], losses[-1]) if len(losses) else (None, None)
    print(json.dumps({"steps": len(losses), "first_loss": first, "last_loss": last}, sort_keys=True))


def cmd_cache(args, cfg, out):
    ds = load_dataset(args.data)
    x, y, _ = sample_few_shot(ds, EpisodeSpec(args.shots, args.seed))
    cache = build_cache(x, y, ds.n_classes, config_hash=cfg.hash)
    save_cache(cache, out / "cache.pacm")
    print(json.dumps({"path": str(out / "cache.pacm"), "n_classes": cache.n_classes, "shots": cache.shots}))


def cmd_train_prompt(args, cfg, out):
    ds, enc, x, y = _cell_setup(args)
    method = cfg.method("prompt_adapter", args.init)
    prompt = _start_prompt(args, cfg, ds, enc)
    opt = method.prompt_opt_for(args.shots, args.seed)
    report = train_prompt(
        enc, prompt, (x, y), ds.classes, opt, ds.split("val"), method.prompt_scale, cfg.hash,
        method.loss_reduction,
    )
    np.save(out / "prompt.npy", prompt.vectors)
    (out / "report.json").write_text(report.to_json())
    print(json.dumps({"prompt": str(out / "prompt.npy"), "best_epoch": report.best_epoch}))


def cmd_train(args, cfg, out):
    ds, enc, x, y = _cell_setup(args)
    method = cfg.method("prompt_adapter_f", args.init, args.strategy)
    prompt = _start_prompt(args, cfg, ds, enc)
    cache = build_cache(x, y, ds.n_classes, config_hash=cfg.hash)
    cache.learnable = True
    val = ds.split("val")

    def sweep(p):
        w = build_classifier_weights(enc, p, ds.classes)
        clip = method.logit_scale * (val[0] @ w.T)
        return harness.sweep_alpha_beta(clip, cache, val[0], val[1], method.alphas, method.betas).hyperparams

    if args.strategy == "separate":
        report = train_separate(
            enc, prompt, cache, (x, y), ds.classes, AdapterHyperparams(),
            method.prompt_opt_for(args.shots, args.seed), replace(method.cache_opt, seed=args.seed),
            val, method.logit_scale, retune=sweep, config_hash=cfg.hash, prompt_scale=method.prompt_scale,
            reduction=method.loss_reduction,
        )
    else:
        hp0 = sweep(prompt)
        opt = harness.joint_budget(method, len(y), args.shots, args.seed)
        report = train_joint(
            enc, prompt, cache, (x, y), ds.classes, hp0, opt, val, method.logit_scale, cfg.hash,
            method.loss_reduction,
        )
    prompt.learnable = False
    hp = sweep(prompt)
    np.save(out / "prompt.npy", prompt.vectors)
    save_cache(cache, out / "cache.pacm")
    (out / "report.json").write_text(report.to_json())
    print(json.dumps({"alpha": hp.alpha, "beta": hp.beta, "best_epoch": report.best_epoch}))


def cmd_multitask(args, cfg, out):
    datasets = [load_dataset(d) for d in args.data]
    check_shared_encoder(datasets)
    method = cfg.method("prompt_adapter", "pretrained-multitask")
    shared = harness.shared_prompt_for(datasets, method, args.shots, args.seed)
    np.save(out / "prompt.npy", shared.vectors)
    print(json.dumps({"prompt": str(out / "prompt.npy"), "tasks": len(datasets)}))


def cmd_eval(args, cfg, out):
    ds = load_dataset(args.data)
    method = cfg.method(args.method, args.init, args.strategy)
    shared = _load_prompt(args.prompt) if args.prompt else None
    if method.prompt_init == "pretrained-multitask" and shared is None:
        raise UsageError("--init pretrained-multitask needs --prompt <shared prompt .npy>")
    row = harness.run_cell(ds, method, args.shots, args.seed, shared_prompt=shared).row
    _append_row(out / "results.csv", row)
    print(json.dumps(row.to_csv(), sort_keys=True))


def cmd_sweep(args, cfg, out):
    ds, enc, x, y = _cell_setup(args)
    method = cfg.method("tip_adapter")
    prompt = _load_prompt(args.prompt) if args.prompt else zero_shot_prompt(ds, enc)
    cache = build_cache(x, y, ds.n_classes)
    xv, yv = ds.split("val")
    w = build_classifier_weights(enc, prompt, ds.classes)
    res = harness.sweep_alpha_beta(method.logit_scale * (xv @ w.T), cache, xv, yv, method.alphas, method.betas)
    (out / "surface.csv").write_text(res.surface_csv())
    print(json.dumps({"alpha": res.alpha, "beta": res.beta, "val_accuracy": res.accuracy}))


def cmd_grid(args, cfg, out):
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    paths = args.data or cfg.dataset_paths
    if paths:
        datasets = [load_dataset(d) for d in paths]
    else:
        datasets, _, _ = generate_suite(cfg.synthetic(args.seed), cfg.n_tasks, cfg.dataset_name)
    (out / "config.json").write_text(cfg.to_json())

    rows, summary = harness.run_experiment(
        datasets, cfg.methods(), cfg.shots, cfg.seeds, out_dir=out, workers=args.workers, log=_emit
    )
    print(json.dumps({"rows": len(rows), "results": str(out / "results.csv")}))


def cmd_report(args, cfg, out):
    if not Path(args.rows).exists():
        raise ValidationError(f"results file {args.rows} does not exist")
    rows = harness.read_rows(args.rows)
    summary = harness.write_summary(rows, out / "summary.json")
    print(json.dumps(summary, sort_keys=True))


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "cache": cmd_cache,
    "train-prompt": cmd_train_prompt,
    "train": cmd_train,
    "multitask-init": cmd_multitask,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "grid": cmd_grid,
    "report": cmd_report,
}


def dispatch(argv=None) -> int:
    """Run one command; returns 0 on success, 1 on user error, 2 on runtime failure."""
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg = ExperimentConfig.load(args.config, [*args.set, *_flag_overrides(args)])
        out = _out_dir(args, cfg)
        _emit(
            "start",
            command=args.command,
            seed=getattr(args, "seed", None),
            config_hash=cfg.hash,
            overrides=cfg.sources,
            out=str(out),
        )
        t0 = time.perf_counter()
        COMMANDS[args.command](args, cfg, out)
        _emit("done", command=args.command, seconds=round(time.perf_counter() - t0, 3))
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PromptAdapterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        log.exception("runtime failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
