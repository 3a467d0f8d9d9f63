"""Versioned JSON experiment configuration."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .groups import BUILTIN_NAMES
from .tasks import IMAGE_GROUPS
from .training import DEFAULT_GRID, TrainConfig

CONFIG_VERSION = 1

SEQUENCE_DEFAULTS = {
    "version": CONFIG_VERSION,
    "experiment": "sequence",
    "task": 1,
    "data": {"n_train": 8000, "n_test": 2000, "val_frac": 0.2},
    "network": {"embed": [32, 16], "hidden": 128, "head_hidden": [128, 128, 128], "activation": "relu",
                "encoding": "onehot"},
    "train": {"learning_rate": 1e-3, "batch_size": 128, "max_epochs": 500, "patience": 50,
              "optimizer": "adam", "tau": 10.0, "penalty_norms": "relative"},
    "lambda_grid": list(DEFAULT_GRID),
    "seeds": [0],
}

GLYPH_DEFAULTS = {
    "version": CONFIG_VERSION,
    "experiment": "glyph",
    "I": ["color"],
    "data": {"n_train": 4000, "n_test": 1000, "val_frac": 0.2},
    "network": {"channels": 16, "activation": "relu"},
    "train": {"learning_rate": 1e-3, "batch_size": 64, "max_epochs": 500, "patience": 25,
              "optimizer": "adam", "tau": 10.0, "penalty_norms": "relative"},
    "lambda_grid": list(DEFAULT_GRID),
    "seeds": [0],
}

LATTICE_DEFAULTS = {
    "version": CONFIG_VERSION,
    "experiment": "lattice",
    "family": {"kind": "image", "shape": [3, 3, 3], "groups": ["rot90", "color_perm"]},
}

TOP_KEYS = {"version", "experiment", "task", "I", "family", "data", "network", "train", "lambda_grid", "seeds",
            "out"}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def defaults_for(experiment: str) -> dict:
    try:
        return {"sequence": SEQUENCE_DEFAULTS, "glyph": GLYPH_DEFAULTS, "lattice": LATTICE_DEFAULTS}[experiment]
    except KeyError:
        raise ConfigError(f"unknown experiment {experiment!r}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                experiment: str = "sequence") -> dict:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    exp = raw.get("experiment", experiment)
    cfg = _merge(defaults_for(exp), raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.get('version')!r}")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    exp = cfg["experiment"]
    if exp == "sequence":
        if cfg.get("task") not in (1, 2, 3, 4):
            raise ConfigError("sequence task must be 1, 2, 3 or 4")
    elif exp == "glyph":
        bad = set(cfg.get("I", [])) - set(IMAGE_GROUPS)
        if bad:
            raise ConfigError(f"unknown image groups {sorted(bad)}")
    elif exp == "lattice":
        fam = cfg.get("family", {})
        kind = fam.get("kind")
        if kind == "image":
            bad = set(fam.get("groups", [])) - set(BUILTIN_NAMES)
            if bad or not fam.get("groups"):
                raise ConfigError(f"bad image family groups {fam.get('groups')!r}")
        elif kind == "transpositions":
            if int(fam.get("n", 0)) < 2:
                raise ConfigError("transposition family needs n >= 2")
        else:
            raise ConfigError(f"unknown family kind {kind!r}")
        return
    if exp in ("sequence", "glyph"):
        grid = cfg.get("lambda_grid")
        if not grid or any(float(g) < 0 for g in grid):
            raise ConfigError("lambda grid must be a non-empty list of nonnegative numbers")
        if not cfg.get("seeds"):
            raise ConfigError("at least one seed is required")
        train_config(cfg)


def train_config(cfg: dict, **kw) -> TrainConfig:
    try:
        return TrainConfig(**{**cfg["train"], **kw})
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from None


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()
