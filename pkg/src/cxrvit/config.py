"""Run configuration: defaults < config file < command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path

from .errors import ConfigurationError
from .training import TrainConfig

DESK_DEFAULTS = {
    "seed": 0,
    "image_size": 32,
    "batch_size": 32,
    "lr_init": 1e-3,
    "weight_decay": None,  # resolved per family
    "max_epochs": 30,
    "warmup_epochs": 2,
    "patience": 5,
    "distill_lambda": 1.0,
    "distill_temperature": 1.0,
    "augment": True,
    "policy": "u_ones",
    "fold": 1,
    "threshold": 0.5,
    "dtype": "float32",
}

# Full-scale recipe: 224 px, batch 128, 50 epochs, lr 1e-4 (CNN) / 5e-5 (ViT).
PAPER_SCALE = {
    "image_size": 224,
    "batch_size": 128,
    "max_epochs": 50,
    "lr_init": None,  # resolved per family
}

TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"augment"}


def defaults(paper_scale: bool = False) -> dict:
    cfg = dict(DESK_DEFAULTS)
    env_seed = os.environ.get("DDB_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"DDB_SEED must be an integer, got {env_seed!r}") from None
    if paper_scale:
        cfg.update(PAPER_SCALE)
    cfg["paper_scale"] = paper_scale
    return cfg


def resolve(flags: dict, config_file=None) -> dict:
    """Merge defaults, an optional flat JSON file and non-None flags."""
    file_cfg = {}
    if config_file:
        try:
            file_cfg = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {config_file}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigurationError(f"config {config_file} must hold a JSON object")
    paper = bool(flags.get("paper_scale") or file_cfg.get("paper_scale"))
    cfg = defaults(paper)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    cfg["paper_scale"] = paper
    return cfg


def train_config(cfg: dict, family: str) -> TrainConfig:
    """Build a :class:`TrainConfig` from a resolved run config."""
    from .data import AugmentConfig

    values = {k: cfg[k] for k in TRAIN_KEYS if k in cfg and cfg[k] is not None}
    if cfg.get("lr_init") is None:
        values["lr_init"] = 1e-4 if family == "densenet" else 5e-5
    if cfg.get("weight_decay") is None:
        values["weight_decay"] = 1e-4 if family == "densenet" else 0.05
    values["augment"] = AugmentConfig() if cfg.get("augment", True) else None
    return TrainConfig(**values)


def dump(cfg: dict, path) -> Path:
    path = Path(path)
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    path.write_text(json.dumps(clean, indent=1, sort_keys=True) + "\n")
    return path
