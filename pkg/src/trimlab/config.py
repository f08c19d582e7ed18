"""Run configuration: JSON sections task/model/train/sparsity/runtime/output.

Unknown keys are rejected by name; every default is materialized into the
resolved copy each command writes, so re-running from that copy reproduces
the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .blocks import ModelSpec, default_spec
from .data import TaskSpec
from .masking import SparsityConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


_DEFAULTS = {
    "task": {
        "task": "tone_class",
        "sample_rate": 8000,
        "clip_samples": 4000,
        "noise_std": 0.05,
        "train_size": 2000,
        "val_size": 500,
        "test_size": 500,
        "seed": 0,
    },
    "model": {
        "backbone": "conformer_t",
        "feature_dim": 128,
        "d_model": 64,
        "num_layers": 4,
        "num_heads": 4,
        "ffn_hidden": 128,
        "conv_channels": [32, 64, 64, 128],
        "conformer_conv_channels": 64,
        "head_hidden": 256,
    },
    "train": {
        "mode": "probe",
        "steps": 5000,
        "batch_size": 32,
        "lr": 1e-3,
        "warmup_steps": None,
        "seed": 0,
        "loss_kind": None,  # derived from the task unless set
        "eval_every": 250,
        "mask_fraction": 0.3,
    },
    "sparsity": {
        "t": 0.5,
        "lambda": "auto",
        "norm_scope": "site",
    },
    "runtime": {
        "precision": "f32",
        "threads": None,
    },
}


def _merge_section(section: str, given: dict) -> dict:
    defaults = _DEFAULTS[section]
    merged = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {section}.{key!r} in config")
        merged[key] = value
    return merged


@dataclass
class RunConfig:
    task: TaskSpec
    model: dict
    train: TrainConfig
    sparsity: SparsityConfig
    precision: str = "f32"
    threads: int | None = None
    output: str = "runs/out"

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def model_spec(self, with_head: bool = True, task: TaskSpec | None = None) -> ModelSpec:
        task = task or self.task
        m = self.model
        return default_spec(
            m["backbone"],
            num_outputs=task.num_outputs if with_head and task.num_outputs else None,
            feature_dim=m["feature_dim"],
            d_model=m["d_model"],
            num_layers=m["num_layers"],
            num_heads=m["num_heads"],
            ffn_hidden=m["ffn_hidden"],
            conv_channels=tuple(m["conv_channels"]),
            conformer_conv_channels=m["conformer_conv_channels"],
            head_hidden=m["head_hidden"],
        )

    def pretext_task(self) -> TaskSpec:
        d = self.task.to_dict()
        d["task"] = "pretext"
        return TaskSpec(**d)

    def resolved(self) -> dict:
        t = self.train
        return {
            "task": self.task.to_dict(),
            "model": dict(self.model),
            "train": {
                "mode": t.mode,
                "steps": t.steps,
                "batch_size": t.batch_size,
                "lr": t.lr,
                "warmup_steps": t.warmup_steps,
                "seed": t.seed,
                "loss_kind": t.loss_kind,
                "eval_every": t.eval_every,
                "mask_fraction": t.mask_fraction,
            },
            "sparsity": {
                "t": self.sparsity.t,
                "lambda": self.sparsity.lam,
                "norm_scope": self.sparsity.norm_scope,
            },
            "runtime": {"precision": self.precision, "threads": self.threads},
            "output": self.output,
        }


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = set(_DEFAULTS) | {"output"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in config")
    for section in _DEFAULTS:
        if section in doc and not isinstance(doc[section], dict):
            raise ConfigError(f"section {section!r} must be an object")

    task_d = _merge_section("task", doc.get("task", {}))
    model_d = _merge_section("model", doc.get("model", {}))
    train_d = _merge_section("train", doc.get("train", {}))
    spars_d = _merge_section("sparsity", doc.get("sparsity", {}))
    runtime_d = _merge_section("runtime", doc.get("runtime", {}))

    try:
        task = TaskSpec(**task_d)
        task.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"task: {e}") from None

    loss_kind = train_d.pop("loss_kind")
    train = TrainConfig(**train_d, loss_kind=loss_kind or task.loss_kind)
    try:
        train.validate()
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None

    spars = SparsityConfig(t=spars_d["t"], lam=spars_d["lambda"], norm_scope=spars_d["norm_scope"])
    try:
        spars.validate()
    except ValueError as e:
        raise ConfigError(f"sparsity: {e}") from None

    if runtime_d["precision"] not in ("f32", "f64"):
        raise ConfigError(f"runtime.precision must be f32 or f64, got {runtime_d['precision']!r}")
    threads = runtime_d["threads"]
    if threads is not None and (not isinstance(threads, int) or threads <= 0):
        raise ConfigError("runtime.threads must be a positive integer or null")

    output = doc.get("output", "runs/out")
    if not isinstance(output, str):
        raise ConfigError("output must be a string path")

    cfg = RunConfig(
        task=task,
        model=model_d,
        train=train,
        sparsity=spars,
        precision=runtime_d["precision"],
        threads=threads,
        output=output,
    )
    try:
        cfg.model_spec(with_head=task.num_outputs > 0)
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(doc)


def default_config() -> RunConfig:
    return config_from_dict({})
