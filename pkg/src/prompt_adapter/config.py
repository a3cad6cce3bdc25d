"""Experiment configuration: JSON file, dotted overrides and a content hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import replace
from pathlib import Path

from .data import SyntheticConfig
from .errors import ConfigError
from .harness import DEFAULT_ALPHAS, DEFAULT_BETAS, MULTITASK_SGD, PROBE_GD, MethodSpec
from .optim import CACHE_ADAMW, PROMPT_SGD, OptimizerConfig

_OPT_KEYS = tuple(k for k in OptimizerConfig().to_dict() if k != "seed")


def _opt(cfg: OptimizerConfig) -> dict:
    # The shuffle seed always comes from the cell seed, never from the file.
    return {k: v for k, v in cfg.to_dict().items() if k != "seed"}


DEFAULTS = {
    "encoder": {"vocab_size": 64, "token_dim": 32, "n_blocks": 1, "max_len": 32},
    "data": {
        "name": "synth",
        "n_tasks": 1,
        "n_classes": 10,
        "n_train": 32,
        "n_val": 50,
        "n_test": 100,
        "dim": 16,
        "sigma": 0.35,
        "mode": "pretrained",
        "separation": 0.5,
        "rejection_budget": 100000,
        "template": [60, 61, 62, 63],
        "domain_shift": 0.5,
        "class_jitter": 0.5,
        "pretrain_steps": 300,
        "pretrain_lr": 0.01,
        "temperature": 0.07,
    },
    "datasets": [],
    "methods": [
        {"kind": "zero_shot"},
        {"kind": "linear_probe"},
        {"kind": "tip_adapter"},
        {"kind": "tip_adapter_f"},
        {"kind": "prompt_adapter", "prompt_init": "manual"},
        {"kind": "prompt_adapter_f", "prompt_init": "manual", "strategy": "separate"},
        {"kind": "prompt_adapter_f", "prompt_init": "manual", "strategy": "joint"},
    ],
    "shots": [16],
    "seeds": [0, 1, 2],
    "grids": {"alphas": list(DEFAULT_ALPHAS), "betas": list(DEFAULT_BETAS)},
    "scales": {"logit": 1.0, "prompt_training": 100.0, "prompt_length": 4},
    "training": {
        "prompt": {k: v for k, v in PROMPT_SGD.to_dict().items() if k not in ("epochs", "seed")},
        "prompt_epochs": None,
        "reduction": "mean",
        "cache": _opt(CACHE_ADAMW),
        "joint": None,
        "multitask": _opt(MULTITASK_SGD),
        "probe": _opt(PROBE_GD),
    },
    "output": {"dir": "runs"},
}

_METHOD_KEYS = ("kind", "prompt_init", "strategy")
# Fields that never change a result and so stay out of the hash.
_UNHASHED = ("output",)


def _check_keys(node, schema, path=""):
    if not isinstance(schema, dict):
        return
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    for key, value in node.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(schema[key], dict):
            _check_keys(value, schema[key], where)


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str):
    """``a.b=value`` -> (["a", "b"], value); value is JSON when it parses."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def _optimizer(raw, name: str) -> OptimizerConfig | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"training.{name} must be an object or null")
    unknown = set(raw) - set(_OPT_KEYS)
    if unknown:
        raise ConfigError(f"unknown optimizer keys in training.{name}: {sorted(unknown)}")
    return OptimizerConfig(**raw)


class ExperimentConfig:
    """Validated experiment configuration.

    Layering is defaults < file < ``--set`` overrides; ``sources`` records
    which layer supplied each overridden leaf.
    """

    def __init__(self, raw: dict | None = None, overrides=(), source: str = "file"):
        raw = raw or {}
        _check_keys(raw, DEFAULTS)
        self.sources: dict = {}
        data = _merge(DEFAULTS, raw)
        for leaf in _leaves(raw):
            self.sources[leaf] = source
        for text in overrides:
            parts, value = parse_override(text)
            node, schema = data, DEFAULTS
            for depth, p in enumerate(parts[:-1]):
                if not isinstance(schema, dict) or p not in schema:
                    raise ConfigError(f"unknown config key {'.'.join(parts)!r}")
                schema = schema[p]
                if depth == 1 and parts[0] == "training" and schema is None:
                    schema = dict.fromkeys(_OPT_KEYS)
                if node.get(p) is None:
                    node[p] = {}
                node = node[p]
                if not isinstance(node, dict):
                    raise ConfigError(f"{'.'.join(parts)!r} does not address a config field")
            if not isinstance(schema, dict) or parts[-1] not in schema:
                raise ConfigError(f"unknown config key {'.'.join(parts)!r}")
            node[parts[-1]] = value
            self.sources[".".join(parts)] = "flag"
        self.data = data
        self._validate()

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file {path} not found") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls(raw, overrides)

    def _validate(self) -> None:
        try:
            self.synthetic(0)
            self.methods()
            for name in ("prompt", "cache", "joint", "multitask", "probe"):
                _optimizer(self.data["training"][name], name)
            pe = self.data["training"]["prompt_epochs"]
            if pe is not None and (not isinstance(pe, int) or pe < 0):
                raise ConfigError("training.prompt_epochs must be null or a non-negative integer")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not self.shots or not self.seeds:
            raise ConfigError("shots and seeds must be non-empty")
        if int(self.data["data"]["n_tasks"]) < 1:
            raise ConfigError("data.n_tasks must be >= 1")

    # -- views ----------------------------------------------------------------

    @property
    def shots(self) -> list:
        return [int(k) for k in self.data["shots"]]

    @property
    def seeds(self) -> list:
        return [int(s) for s in self.data["seeds"]]

    @property
    def output_dir(self) -> str:
        return self.data["output"]["dir"]

    @property
    def n_tasks(self) -> int:
        return int(self.data["data"]["n_tasks"])

    @property
    def dataset_paths(self) -> list:
        """Dataset directories for the grid; empty means generate from ``data``."""
        return [str(p) for p in self.data["datasets"]]

    @property
    def dataset_name(self) -> str:
        return str(self.data["data"]["name"])

    def synthetic(self, seed: int) -> SyntheticConfig:
        d = {k: v for k, v in self.data["data"].items() if k not in ("name", "n_tasks")}
        return SyntheticConfig(seed=int(seed), **d, **self.data["encoder"])

    def optimizer(self, name: str) -> OptimizerConfig | None:
        return _optimizer(self.data["training"][name], name)

    def method(self, kind: str, prompt_init: str = "manual", strategy: str = "none") -> MethodSpec:
        sc = self.data["scales"]
        g = self.data["grids"]
        spec = MethodSpec(
            kind,
            prompt_init,
            strategy,
            logit_scale=float(sc["logit"]),
            train_scale=None if sc["prompt_training"] is None else float(sc["prompt_training"]),
            prompt_length=int(sc["prompt_length"]),
            loss_reduction=self.data["training"]["reduction"],
            alphas=tuple(g["alphas"]),
            betas=tuple(g["betas"]),
        )
        return replace(
            spec,
            prompt_opt=self.optimizer("prompt"),
            prompt_epochs=self.data["training"]["prompt_epochs"],
            cache_opt=self.optimizer("cache"),
            joint_opt=self.optimizer("joint"),
            multitask_opt=self.optimizer("multitask"),
            probe_opt=self.optimizer("probe"),
        )

    def methods(self) -> list:
        out = []
        for m in self.data["methods"]:
            if not isinstance(m, dict) or "kind" not in m:
                raise ConfigError("each method needs at least a 'kind'")
            unknown = set(m) - set(_METHOD_KEYS)
            if unknown:
                raise ConfigError(f"unknown method keys {sorted(unknown)}")
            out.append(self.method(m["kind"], m.get("prompt_init", "manual"), m.get("strategy", "none")))
        return out

    # -- provenance -------------------------------------------------------------

    def hashed_view(self) -> dict:
        return {k: v for k, v in self.data.items() if k not in _UNHASHED}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.hashed_view(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def _leaves(node, prefix=""):
    if isinstance(node, dict) and node:
        for k, v in node.items():
            yield from _leaves(v, f"{prefix}.{k}" if prefix else k)
    elif prefix:
        yield prefix
