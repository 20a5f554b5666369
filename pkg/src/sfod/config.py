"""Flat dotted-key run configuration.

Files use TOML dotted keys, one per line::

    engine.tau = 0.7
    pretrain.lr = 0.001

Precedence: command-line overrides > file > defaults. Unknown keys are
rejected and values are coerced to the type of their default.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # detector
    "detector.score_thresh": 0.05,
    "detector.nms_thresh": 0.5,
    # source pretraining
    "pretrain.epochs": 7,
    "pretrain.batch_size": 2,
    "pretrain.lr": 0.001,
    "pretrain.lr_after": 0.0001,
    "pretrain.decay_epoch": 5,
    "pretrain.momentum": 0.9,
    "pretrain.weight_decay": 0.0005,
    "pretrain.flip": True,
    # source-free adaptation
    "engine.epochs": 7,
    "engine.max_iter": -1,
    "engine.batch_size": 2,
    "engine.lr": 0.001,
    "engine.lr_after": 0.0001,
    "engine.decay_epoch": 5,
    "engine.momentum": 0.9,
    "engine.weight_decay": 0.0005,
    "engine.tau": 0.7,
    "engine.eta": 0.9,
    "engine.ema_period": 0,
    "engine.gamma": 0.5,
    "engine.lam": 0.5,
    "engine.alpha": 0.5,
    "engine.alpha_warmup": 0.1,
    "engine.beta": 0.7,
    "engine.pfd_recurrence": "global",
    "engine.msp": True,
    "engine.afsp": True,
    "engine.pfd": True,
}

DOCS: dict[str, str] = {
    "seed": "master seed for data order, augmentation and ROI sampling (env SFOD_SEED is the fallback)",
    "detector.score_thresh": "minimum class score kept at inference (strictly greater)",
    "detector.nms_thresh": "per-class NMS IoU threshold at inference",
    "pretrain.epochs": "source pretraining epochs",
    "pretrain.batch_size": "images per pretraining step",
    "pretrain.lr": "learning rate before decay_epoch",
    "pretrain.lr_after": "learning rate from decay_epoch on",
    "pretrain.decay_epoch": "first epoch (0-based) using lr_after",
    "pretrain.momentum": "SGD momentum",
    "pretrain.weight_decay": "SGD weight decay",
    "pretrain.flip": "random horizontal flips during pretraining",
    "engine.epochs": "adaptation epochs over the target set",
    "engine.max_iter": "hard cap on adaptation iterations (-1: epochs x batches)",
    "engine.batch_size": "target images per step, even (split in two halves for mixing)",
    "engine.lr": "learning rate before decay_epoch",
    "engine.lr_after": "learning rate from decay_epoch on",
    "engine.decay_epoch": "first epoch (0-based) using lr_after",
    "engine.momentum": "SGD momentum",
    "engine.weight_decay": "SGD weight decay",
    "engine.tau": "pseudo-label score threshold (kept if score >= tau)",
    "engine.eta": "teacher EMA rate: teacher = eta * teacher + (1 - eta) * student",
    "engine.ema_period": "iterations between teacher updates (0: once per epoch)",
    "engine.gamma": "weight of the prototype distillation loss",
    "engine.lam": "pixel mixing coefficient",
    "engine.alpha": "adversarial style mixing coefficient (0.3 for the cross-sensor preset)",
    "engine.alpha_warmup": "fraction of iterations over which alpha ramps up from 0",
    "engine.beta": "prototype EMA rate",
    "engine.pfd_recurrence": "'global' (EMA over global prototypes) or 'local' (blend with previous local)",
    "engine.msp": "enable mixed-sample perturbation",
    "engine.afsp": "enable adversarial feature style perturbation",
    "engine.pfd": "enable prototype distillation",
}

ALPHA_PRESETS = {"default": 0.5, "cross-sensor": 0.3}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def _flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class RunConfig:
    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_dict(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def echo(self) -> dict:
        return {"config": self.to_dict(), "config_hash": self.hash()}

    @classmethod
    def load(cls, path=None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                data = tomllib.loads(path.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            for k, v in _flatten(data).items():
                cfg.set(k, v)
        for k, v in (overrides or {}).items():
            cfg.set(k, v)
        return cfg


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()
