"""Run configuration: YAML in, fully-expanded YAML archived with outputs."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .diarizer import DiarizerConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "sample_rate": 8000,
    "vad": {"frame": 0.03, "hop": 0.01, "threshold_db": 6.0, "hangover": 0.1, "floor_db": -60.0},
    "structure": {"min_gap": 0.1},
    "design": {"pairing": "given", "pair_by": None, "max_permutations": None},
    "render": {"taper": 0.01},
    "diarizer": DiarizerConfig().to_dict(),
    "scoring": {"collar": 0.0, "omit_overlap": True, "entropy_windows": [1.5, 0.75]},
    "analysis": {"metric": "der", "n_boot": 1000, "factors": None},
    "paths": {},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "paths":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    diarizer_config(cfg)
    return cfg


def diarizer_config(cfg: dict) -> DiarizerConfig:
    try:
        return DiarizerConfig(**cfg["diarizer"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"diarizer: {exc}") from None


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def config_hash(cfg: dict) -> str:
    canonical = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode()).hexdigest()
