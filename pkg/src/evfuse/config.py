"""Flat dotted-key configuration: defaults <- YAML file <- overrides.

Every key is validated against ``DEFAULTS``; unknown keys are rejected. The
hash covers the keys that determine the network structure, so checkpoints
and outputs can be checked for compatibility.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .errors import ConfigError

DEFAULTS = {
    "model.variant": "full",
    "backbone.dim": 192,
    "backbone.depth": 6,
    "backbone.heads": 3,
    "backbone.patch_size": 16,
    "backbone.elim_blocks": [2, 4],
    "backbone.keep_ratio": 0.7,
    "backbone.mlp_ratio": 4.0,
    "uncert.heads": 3,
    "uncert.logvar_clamp": 10.0,
    "uncert.logvar_init": -8.0,
    "uncert.sample_at_eval": False,
    "uncert.hidden_ratio": 2.0,
    "head.channels": 64,
    "head.window_penalty": True,
    "head.window_weight": 0.49,
    "loss.lambda_iou": 2.0,
    "loss.lambda_l1": 5.0,
    "loss.alpha_kl": 0.001,
    "data.template_size": 96,
    "data.search_size": 192,
    "data.template_factor": 2.0,
    "data.search_factor": 4.0,
    "data.max_gap": 50,
    "data.center_jitter": 0.25,
    "data.scale_jitter": 1.25,
    "train.lr_backbone": 5e-6,
    "train.lr_other": 5e-5,
    "train.weight_decay": 1e-4,
    "train.lr_decay_factor": 0.2,
    "train.lr_decay_epoch": 50,
    "train.epochs": 20,
    "train.steps_per_epoch": 100,
    "train.batch_size": 8,
    "train.seed": 0,
    "train.grad_clip": 5.0,
    "train.log_every": 1,
    "synth.n": 4,
    "synth.n_frames": 64,
    "synth.width": 256,
    "synth.height": 256,
    "synth.object_w": 40,
    "synth.object_h": 32,
    "synth.speed": 3.0,
    "synth.event_threshold": 0.2,
    "synth.noise": 0.0,
    "synth.misalign": [0, 0, 0],
    "synth.seed": 0,
}

# keys that change parameter shapes or the forward computation
STRUCTURE_PREFIXES = ("model.", "backbone.", "uncert.", "head.channels", "data.template_size",
                      "data.search_size")


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(value, (bool, int)):
            return bool(value)
    elif isinstance(default, int):
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
        if isinstance(value, (list, tuple)):
            elem = default[0] if default else 0
            return [_coerce(key, v, elem) for v in value]
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: cannot use {value!r} where {type(default).__name__} is expected")


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class RunConfig(dict):
    """Validated flat configuration mapping."""

    def __init__(self, overrides: Optional[Mapping] = None):
        super().__init__(DEFAULTS)
        if overrides:
            self.update_checked(overrides)

    def update_checked(self, overrides: Mapping):
        for key, value in _flatten(overrides).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            self[key] = _coerce(key, value, DEFAULTS[key])
        self.validate()
        return self

    def validate(self):
        if self["model.variant"] not in ("full", "baseline"):
            raise ConfigError("model.variant must be 'full' or 'baseline'")
        if not 0 < self["backbone.keep_ratio"] <= 1:
            raise ConfigError("backbone.keep_ratio must lie in (0, 1]")
        if self["backbone.dim"] % self["backbone.heads"] or self["backbone.dim"] % self["uncert.heads"]:
            raise ConfigError("backbone.dim must be divisible by backbone.heads and uncert.heads")
        for k in ("data.template_size", "data.search_size"):
            if self[k] % self["backbone.patch_size"]:
                raise ConfigError(f"{k} must be divisible by backbone.patch_size")
        for k in ("train.lr_backbone", "train.lr_other"):
            if self[k] <= 0:
                raise ConfigError(f"{k} must be positive")
        if not 0 < self["train.lr_decay_factor"] <= 1:
            raise ConfigError("train.lr_decay_factor must lie in (0, 1]")
        if len(self["synth.misalign"]) != 3:
            raise ConfigError("synth.misalign is dx,dy,dt")

    @classmethod
    def from_file(cls, path, overrides: Optional[Mapping] = None) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        cfg = cls(data)
        if overrides:
            cfg.update_checked(overrides)
        return cfg

    def structure(self) -> dict:
        return {k: v for k, v in sorted(self.items()) if k.startswith(STRUCTURE_PREFIXES)}

    @property
    def structure_hash(self) -> str:
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def hash(self) -> str:
        blob = json.dumps(dict(sorted(self.items())), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(dict(sorted(self.items())), sort_keys=True))

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix + ".")}
