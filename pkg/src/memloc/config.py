"""Run configuration: one YAML file, validated against a versioned schema.

Every key has a default; unknown keys are rejected with the line they sit on.
Command-line overrides are applied on top and end up in the resolved config
that every report embeds.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

import yaml

from .model import fnv1a64

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "schema": SCHEMA_VERSION,
    "seed": 0,
    "dtype": "f32",
    "dataset": {
        "source": "mnist5k",  # mnist5k | idx | synth
        "directory": "data",
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
        "holdout": 1000,
        "noise": 0.1,
        "scores": None,
        "score_threshold": 0.5,
        "flatten": True,
        "synth": {"classes": 10, "per_class": 400, "dim": 64, "margin": 6.0, "test_per_class": 100},
    },
    "model": {
        "kind": "mlp",  # mlp | cnn | custom
        "hidden": [256, 256, 256],
        "norm": False,
        "channels": [32, 64],
        "dense": 256,
        "layers": None,
    },
    "train": {
        "epochs": 30,
        "batch_size": 128,
        "peak_lr": 0.1,
        "peak_epoch": 10,
        "div_factor": 25.0,
        "momentum": 0.9,
        "weight_decay": 5e-4,
    },
    "experiment": {
        "account": {"by_group": False},
        "rewind": {"targets": None, "epochs": None, "rewind_buffers": False},
        "retrain": {"layers": None, "epochs": 20, "peak_lr": 0.1, "peak_epoch": 10, "batch_size": None,
                    "threshold": 0.8},
        "flip": {"n_clean": 200, "n_probe": 200, "budget": 100, "k": 5, "sigma_scale": 0.05,
                 "ref_size": 512, "scorer": "gate", "include_head": False, "repeats": 1},
        "etdrop": {"p_gen": 0.4, "p_mem": 0.1, "grid_p_gen": None, "grid_p_mem": None, "baselines": True},
    },
}

# keys whose value is a free-form list or mapping rather than a nested section
_LEAF_KEYS = {"hidden", "channels", "layers", "targets", "epochs", "grid_p_gen", "grid_p_mem"}

CHOICES = {
    ("dtype",): {"f32", "f64"},
    ("dataset", "source"): {"mnist5k", "idx", "synth"},
    ("model", "kind"): {"mlp", "cnn", "custom"},
    ("experiment", "flip", "scorer"): {"gate", "theta"},
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key, self.line = key, line
        where = "".join([f" key '{key}'" if key else "", f" (line {line})" if line else ""])
        super().__init__(f"config error{where}: {message}")


def _check_node(node, schema: dict, path: list[str]) -> None:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", ".".join(path) or None, node.start_mark.line + 1)
    for k_node, v_node in node.value:
        key = k_node.value
        dotted = ".".join(path + [key])
        if key not in schema:
            raise ConfigError("unknown key", dotted, k_node.start_mark.line + 1)
        sub = schema[key]
        if isinstance(sub, dict) and key not in _LEAF_KEYS and isinstance(v_node, yaml.MappingNode):
            _check_node(v_node, sub, path + [key])
        elif isinstance(sub, dict) and key not in _LEAF_KEYS:
            raise ConfigError("expected a mapping", dotted, v_node.start_mark.line + 1)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in _LEAF_KEYS:
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_values(cfg: dict) -> None:
    if cfg["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {cfg['schema']} (expected {SCHEMA_VERSION})", "schema")
    for path, allowed in CHOICES.items():
        v = cfg
        for p in path:
            v = v[p]
        if v not in allowed:
            raise ConfigError(f"{v!r} not in {sorted(allowed)}", ".".join(path))
    if not 0 <= cfg["dataset"]["noise"] < 1:
        raise ConfigError("noise rate must be in [0, 1)", "dataset.noise")
    if cfg["train"]["epochs"] < 0:
        raise ConfigError("epochs must be >= 0", "train.epochs")


def parse_config(text: str, overrides: dict | None = None) -> dict:
    """Validate YAML text and return the resolved config (defaults, file, then overrides)."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(getattr(exc, "problem", exc)), line=mark.line + 1 if mark else None) from None
    data = {}
    if node is not None:
        _check_node(node, DEFAULTS, [])
        data = yaml.safe_load(text) or {}
    cfg = _merge(DEFAULTS, data)
    for dotted, v in (overrides or {}).items():
        if v is None:
            continue
        parts = dotted.split(".")
        d = cfg
        for p in parts[:-1]:
            d = d[p]
        if parts[-1] not in d:
            raise ConfigError("unknown key", dotted)
        d[parts[-1]] = v
    _check_values(cfg)
    return cfg


def load_config(path, overrides: dict | None = None) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {p}")
    return parse_config(p.read_text(), overrides)


def config_digest(cfg: dict) -> str:
    return fnv1a64(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode())


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
