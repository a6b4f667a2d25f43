"""Experiment configuration: defaults, validation and hashing.

Config files are JSON.  Nested objects are flattened to dotted keys, so
``{"optim": {"lr": 0.1}}`` and ``{"optim.lr": 0.1}`` are equivalent.  Any key
not listed in :data:`DEFAULTS` is rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

EXPERIMENTS = ("dynamics", "surface", "train", "eval", "decompose", "rademacher", "gen-data")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "experiment": None,
    "seed": 0,
    "out": None,
    # ensemble
    "K": 3,
    "lambda": 5e-3,
    "heads.weighted": False,
    "heads.constant_mean": False,
    "model.hidden": [48],
    "model.activation": "tanh",
    # accuracy term
    "loss": "l2",
    "smoothl1.t": 1.0,
    "tukey.c": 4.6851,
    # optimizer / loop; batch_size 0 means full batch
    "optim.lr": 0.05,
    "optim.momentum": 0.9,
    "optim.weight_decay": 5e-4,
    "train.epochs": 200,
    "train.batch_size": 32,
    # data
    "data.source": "spirals",
    "data.csv": None,
    "data.features": [],
    "data.targets": [],
    "data.test_fraction": 0.25,
    "data.standardize": False,
    "spirals.points": 200,
    "spirals.turns": 2.0,
    "spirals.noise": 0.05,
    # scalar convergence toy
    "toy.target": -1.5,
    "toy.regressors": 6,
    "toy.iterations": 30,
    "toy.lr": 0.1,
    "toy.init_low": -4.0,
    "toy.init_high": 1.0,
    # decision-surface experiment
    "surface.resolution": 200,
    "surface.test_points": 200,
    "surface.margin": 0.1,
    # train pipeline / eval / decompose
    "pipeline.trials": 1,
    "eval.checkpoint": None,
    "eval.cs_level": 5.0,
    "decompose.predictions": None,
    "decompose.targets": None,
    # rademacher probe
    "rademacher.features": None,
    "rademacher.layout": "isotropic",
    "rademacher.n": 200,
    "rademacher.f": 64,
    "rademacher.K": [2, 4, 8],
    "rademacher.bound": 1.0,
    "rademacher.trials": 10000,
    # gen-data
    "gen.kind": "spirals",
    # reporting
    "report.figures": True,
}

# Per-experiment defaults layered over DEFAULTS before the user file.
EXPERIMENT_DEFAULTS: dict = {
    "dynamics": {"seed": 7},
    "surface": {
        "K": 3,
        "lambda": 0.2,
        "model.hidden": [120],
        "optim.lr": 0.2,
        "optim.weight_decay": 0.0,
        "train.epochs": 4000,
        "train.batch_size": 0,
    },
}

_CHOICES = {
    "loss": ("l2", "smoothl1", "tukey"),
    "model.activation": ("relu", "tanh", "identity"),
    "data.source": ("spirals", "csv"),
    "rademacher.layout": ("isotropic", "single_block"),
    "gen.kind": ("spirals", "toy"),
}


def flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, val in tree.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(flatten(val, name + "."))
        else:
            flat[name] = val
    return flat


def _type_ok(default, value) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def resolve(experiment: str, user: dict | None = None, seed: int | None = None,
            out: str | None = None) -> dict:
    """Merge defaults, per-experiment defaults, the user config and CLI overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(EXPERIMENT_DEFAULTS.get(experiment, {})))
    flat = flatten(user or {})
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, val in flat.items():
        if not _type_ok(DEFAULTS[key] if DEFAULTS[key] is not None else cfg[key], val):
            raise ConfigError(f"config key {key!r}: bad value {val!r}")
        cfg[key] = val
    if cfg["experiment"] not in (None, experiment):
        raise ConfigError(f"config is for experiment {cfg['experiment']!r}, not {experiment!r}")
    cfg["experiment"] = experiment
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if cfg["out"] is None:
        cfg["out"] = f"runs/{experiment}"
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for key, choices in _CHOICES.items():
        if cfg[key] not in choices:
            raise ConfigError(f"{key} must be one of {choices}, got {cfg[key]!r}")

    def positive(*keys):
        for k in keys:
            if not cfg[k] > 0:
                raise ConfigError(f"{k} must be positive, got {cfg[k]!r}")

    positive("K", "smoothl1.t", "tukey.c", "optim.lr", "train.epochs", "spirals.points",
             "spirals.turns", "toy.regressors", "toy.iterations", "toy.lr", "surface.resolution",
             "surface.test_points", "pipeline.trials", "rademacher.n", "rademacher.f",
             "rademacher.bound", "rademacher.trials")
    if not 0 <= cfg["lambda"] < 1:
        raise ConfigError(f"lambda must lie in [0, 1), got {cfg['lambda']}")
    if not 0 <= cfg["optim.momentum"] < 1:
        raise ConfigError("optim.momentum must lie in [0, 1)")
    if cfg["optim.weight_decay"] < 0 or cfg["train.batch_size"] < 0 or cfg["spirals.noise"] < 0:
        raise ConfigError("weight_decay, batch_size and noise must be nonnegative")
    if not 0 <= cfg["data.test_fraction"] < 1:
        raise ConfigError("data.test_fraction must lie in [0, 1)")
    hidden = cfg["model.hidden"]
    if not hidden or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError(f"model.hidden must be a nonempty list of positive ints, got {hidden!r}")
    if hidden[-1] % cfg["K"]:
        raise ConfigError(f"last hidden size {hidden[-1]} is not divisible by K={cfg['K']}")
    if not all(isinstance(k, int) and k > 0 for k in cfg["rademacher.K"]):
        raise ConfigError("rademacher.K must be a list of positive ints")
    if cfg["toy.init_low"] > cfg["toy.init_high"]:
        raise ConfigError("toy.init_low exceeds toy.init_high")


def load(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
