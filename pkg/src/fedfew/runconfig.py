"""Run configuration files and the reproducibility manifest.

A run config is a JSON or TOML document with nested sections (data,
model, pretrain, partition, rounds, augmentation, pvp) plus top-level
mode, seeds, and out_dir. Missing keys fall back to defaults, unknown
keys are rejected, and the fully materialized result is embedded in a
manifest whose content is enough to reproduce the run bit for bit.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from .errors import ValidationError
from .metrics import MODES

DEFAULTS: dict[str, Any] = {
    "mode": "fedprompt",
    "seeds": [1, 2, 3],
    "out_dir": "runs/run",
    "fullset_accuracy": None,
    "measure_time": False,
    "data": {
        "train_path": None,
        "test_path": None,
        "validation_path": None,
        "label_names": None,
        "synthetic": {
            "num_classes": 4,
            "examples_per_class": 500,
            "keywords_per_class": 6,
            "noise_word_count": 3,
            "pair_mode": False,
            "seed": 11,
        },
        "test_fraction": 0.2,
        "validation_fraction": 0.1,
        "split_seed": 11,
    },
    "model": {
        "d_model": 32,
        "num_layers": 2,
        "num_heads": 4,
        "d_ffn": 64,
        "max_seq_len": 32,
    },
    "pretrain": {
        "steps": 6000,
        "learning_rate": 1e-3,
        "batch_size": 8,
        "checkpoint": None,
    },
    "partition": {
        "num_clients": 32,
        "n_labeled": 64,
        "gamma": 100.0,
        "xi": 32,
        "alpha": 1.0,
        "select_random_xi": False,
    },
    "rounds": {
        "learning_rate": 2e-3,
        "max_rounds": 40,
        "participants_per_round": 5,
        "local_iterations": 1,
        "batch_size": 4,
        "patience": 10,
        "optimizer": "adam",
    },
    "augmentation": {
        "enabled": False,
        "confidence_threshold": 0.9,
        "per_client_budget": 100,
        "cumulative": False,
        "capacity_check": True,
        "full_scan": False,
    },
    "pvp": {
        "pattern": None,
        "verbalizer": None,
    },
}

SWEEP_DEFAULTS: dict[str, Any] = {
    "n_labeled": [16, 64, 256],
    "gamma": [100.0],
    "mode": ["fedprompt", "fedcls"],
}


def load_config_file(path) -> dict:
    """Parse a JSON or TOML config document into a plain dict."""
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    raw = p.read_bytes()
    try:
        if p.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot parse {p}: {exc}") from exc


def config_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ValidationError(f"unknown config key {where}{key}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where}{key} must be a table")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_overrides(resolved: dict, overrides: dict) -> None:
    """Dotted-path overrides from CLI flags; highest precedence."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = resolved
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValidationError(f"unknown config key {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config key {dotted}")
        node[parts[-1]] = value


def _require_positive(section: dict, where: str, keys: list[str]) -> None:
    for key in keys:
        value = section[key]
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise ValidationError(f"{where}{key} must be a positive number")


def _validate_common(cfg: dict) -> None:
    seeds = cfg["seeds"]
    if (not isinstance(seeds, list) or not seeds
            or any(not isinstance(s, int) or isinstance(s, bool) for s in seeds)):
        raise ValidationError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("seeds must be distinct")
    data = cfg["data"]
    paths = [data["train_path"], data["test_path"], data["validation_path"]]
    if any(p is not None for p in paths):
        if not all(isinstance(p, str) and p for p in paths):
            raise ValidationError(
                "data.train_path, data.test_path and data.validation_path "
                "must all be set when loading from files")
        if not data["label_names"]:
            raise ValidationError("data.label_names is required with file paths")
    else:
        frac_t, frac_v = data["test_fraction"], data["validation_fraction"]
        for name, frac in (("test_fraction", frac_t), ("validation_fraction", frac_v)):
            if not isinstance(frac, float) or not 0.0 < frac < 1.0:
                raise ValidationError(f"data.{name} must lie in (0, 1)")
        if frac_t + frac_v >= 1.0:
            raise ValidationError("test and validation fractions must sum below 1")
    _require_positive(cfg["model"], "model.",
                      ["d_model", "num_layers", "num_heads", "d_ffn", "max_seq_len"])
    if cfg["pretrain"]["steps"] < 0:
        raise ValidationError("pretrain.steps must be non-negative")
    _require_positive(cfg["pretrain"], "pretrain.", ["learning_rate", "batch_size"])
    pvp = cfg["pvp"]
    if pvp["verbalizer"] is not None and not isinstance(pvp["verbalizer"], dict):
        raise ValidationError("pvp.verbalizer must map label names to tokens")


def resolve_run(file_cfg: dict, overrides: Optional[dict] = None) -> dict:
    """Materialize defaults, apply CLI overrides, and validate."""
    cfg = _merge(DEFAULTS, file_cfg, "")
    if overrides:
        _apply_overrides(cfg, overrides)
    if cfg["mode"] not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    _validate_common(cfg)
    return cfg


def resolve_sweep(file_cfg: dict, overrides: Optional[dict] = None) -> dict:
    """Like resolve_run but with a grid section of axis lists."""
    file_cfg = dict(file_cfg)
    grid_given = file_cfg.pop("grid", {})
    if not isinstance(grid_given, dict):
        raise ValidationError("grid must be a table of axis lists")
    grid = _merge(SWEEP_DEFAULTS, grid_given, "grid.")
    for axis in ("n_labeled", "gamma", "mode"):
        values = grid[axis]
        if not isinstance(values, list) or not values:
            raise ValidationError(f"grid.{axis} must be a non-empty list")
        if len(set(map(str, values))) != len(values):
            raise ValidationError(f"grid.{axis} values must be distinct")
    for mode in grid["mode"]:
        if mode not in MODES:
            raise ValidationError(f"grid.mode entries must be one of {MODES}")
    cfg = resolve_run(file_cfg, overrides)
    cfg["grid"] = grid
    return cfg


def out_root(out_dir) -> Path:
    """Resolve the output directory, honoring FEDFEW_OUT_ROOT for relative paths."""
    path = Path(out_dir)
    root = os.environ.get("FEDFEW_OUT_ROOT")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def parallel_degree() -> int:
    raw = os.environ.get("FEDFEW_PARALLEL", "1")
    try:
        degree = int(raw)
    except ValueError:
        raise ValidationError(f"FEDFEW_PARALLEL must be an integer, got {raw!r}")
    if degree < 1:
        raise ValidationError("FEDFEW_PARALLEL must be >= 1")
    return degree


def build_manifest(resolved: dict, digest: Optional[str]) -> dict:
    return {
        "config": resolved,
        "config_digest": digest,
        "tool_version": __version__,
        "seeds": list(resolved["seeds"]),
    }


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
