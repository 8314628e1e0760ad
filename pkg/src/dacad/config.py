"""Experiment configuration: a JSON document validated up front.

Hyper-parameters the method leaves open (lambda, projection count, loop
bounds, embedding width, learning rate, augmentation magnitudes) must be
written in the file; everything else falls back to a default that is echoed
into the resolved config saved next to the run outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .data import GENERATORS, AugmentConfig
from .model import Architecture
from .swd import SwdConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


REQUIRED = {
    "model": ("embed_dim",),
    "train": ("lambda", "itr", "alt", "lr"),
    "swd": ("num_projections",),
}
AUGMENT_KEYS = ("translation", "rotation", "skew", "zoom", "gaussian_sigma", "binomial_p",
                "invert_p")

_TRAIN_KEYS = {
    "lambda": "lam", "tau": "tau", "itr": "itr", "alt": "alt", "lr": "lr", "swd_lr": "swd_lr",
    "batch_per_class": "batch_per_class", "ce_batch_size": "ce_batch_size",
    "beta1": "beta1", "beta2": "beta2", "eps": "eps",
    "pretrain_epochs": "pretrain_epochs", "pretrain_batch_size": "pretrain_batch_size",
    "cotrain_encoder": "cotrain_encoder", "align_source_grad": "align_source_grad",
}


@dataclass
class ExperimentConfig:
    task: dict
    model: dict
    train: dict
    swd: dict
    augment: dict | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    embedding_every: int = 0
    out: str = "runs/default"

    # -- derived objects ------------------------------------------------------

    def is_image_task(self) -> bool:
        return "generator" not in self.task and any(
            "images" in self.task.get(side, {}) for side in ("source", "target"))

    def swd_config(self) -> SwdConfig:
        return SwdConfig(num_projections=int(self.swd["num_projections"]),
                         p=float(self.swd.get("p", 2.0)),
                         normalization=self.swd.get("normalization", "mean"),
                         seed=int(self.swd.get("seed", 0)))

    def augment_config(self) -> AugmentConfig | None:
        if self.augment is None:
            return None
        return AugmentConfig(**{k: float(self.augment[k]) for k in AUGMENT_KEYS})

    def train_config(self, seed: int) -> TrainConfig:
        kw = {_TRAIN_KEYS[k]: v for k, v in self.train.items()}
        return TrainConfig(seed=seed, swd=self.swd_config(), augment=self.augment_config(), **kw)

    def architecture(self, input_dim: int, num_classes: int) -> Architecture:
        m = self.model
        return Architecture(
            input_dim=input_dim,
            num_classes=int(m.get("num_classes", num_classes)),
            hidden=tuple(m.get("hidden", [256])),
            embed_dim=int(m["embed_dim"]),
            classifier_hidden=tuple(m.get("classifier_hidden", [])),
        )

    def resolved(self) -> dict:
        """Config with every default filled in, for the run manifest.

        The output directory is left out so that the same experiment written
        to two places yields identical files and the same run id.
        """
        tc = self.train_config(self.seeds[0])
        train = {k: getattr(tc, attr) for k, attr in _TRAIN_KEYS.items()}
        out = asdict(self)
        del out["out"]
        out["train"] = train
        out["swd"] = {"num_projections": tc.swd.num_projections, "p": tc.swd.p,
                      "normalization": tc.swd.normalization, "seed": tc.swd.seed}
        out["model"] = {"hidden": list(self.model.get("hidden", [256])),
                        "embed_dim": int(self.model["embed_dim"]),
                        "classifier_hidden": list(self.model.get("classifier_hidden", []))}
        if "num_classes" in self.model:
            out["model"]["num_classes"] = int(self.model["num_classes"])
        return out


def _require_dict(raw: dict, key: str) -> dict:
    val = raw.get(key)
    if not isinstance(val, dict):
        raise ConfigError(key, "missing or not an object")
    return val


def _validate_dataset_ref(ref: Any, where: str, base: Path) -> dict:
    if not isinstance(ref, dict):
        raise ConfigError(where, "must be an object with 'csv' or 'images'+'labels'")
    if "csv" in ref:
        keys = ("csv",)
    elif "images" in ref or "labels" in ref:
        keys = ("images", "labels")
    else:
        raise ConfigError(where, "needs 'csv' or 'images'+'labels'")
    out = dict(ref)
    for k in keys:
        if k not in ref:
            raise ConfigError(f"{where}.{k}", "missing")
        path = Path(ref[k])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"{where}.{k}", f"file not found: {path}")
        out[k] = str(path)
    return out


def parse_config(raw: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a decoded config document. Relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {"task", "model", "train", "swd", "augment", "seeds", "embedding_every", "out"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown key")

    task = dict(_require_dict(raw, "task"))
    if "generator" in task:
        if task["generator"] not in GENERATORS:
            raise ConfigError("task.generator", f"unknown generator {task['generator']!r}")
        if not isinstance(task.get("params", {}), dict):
            raise ConfigError("task.params", "must be an object")
        task.setdefault("params", {})
        task.setdefault("seed", 0)
    else:
        for side in ("source", "target"):
            if side not in task:
                raise ConfigError(f"task.{side}", "missing (or give task.generator)")
            task[side] = _validate_dataset_ref(task[side], f"task.{side}", base)

    sections = {}
    for name, required in REQUIRED.items():
        sec = _require_dict(raw, name)
        for key in required:
            if key not in sec:
                raise ConfigError(f"{name}.{key}", "required (no silent default for this value)")
        sections[name] = dict(sec)
    for key in sections["train"]:
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"train.{key}", "unknown key")

    augment = raw.get("augment")
    cfg = ExperimentConfig(task=task, augment=augment, **sections)
    if cfg.is_image_task() and augment is None:
        raise ConfigError("augment", "required for image tasks (use zeros to disable)")
    if augment is not None:
        if not isinstance(augment, dict):
            raise ConfigError("augment", "must be an object")
        for key in AUGMENT_KEYS:
            if key not in augment:
                raise ConfigError(f"augment.{key}", "required")
        try:
            cfg.augment_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("augment", str(exc)) from None

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    cfg.seeds = seeds
    every = raw.get("embedding_every", 0)
    if not isinstance(every, int) or every < 0:
        raise ConfigError("embedding_every", "must be a non-negative integer")
    cfg.embedding_every = every
    cfg.out = str(raw.get("out", cfg.out))

    try:
        cfg.swd_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError("swd", str(exc)) from None
    try:
        cfg.train_config(seeds[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    m = cfg.model
    if not isinstance(m["embed_dim"], int) or m["embed_dim"] < 1:
        raise ConfigError("model.embed_dim", "must be a positive integer")
    if not all(isinstance(h, int) and h > 0 for h in m.get("hidden", [256])):
        raise ConfigError("model.hidden", "must be a list of positive integers")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return parse_config(raw, path.parent)
