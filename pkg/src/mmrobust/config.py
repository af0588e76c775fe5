"""Run configuration: JSON files with flat per-section objects plus dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .adversary import AttackConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "model": {"kind": "mlp"},
    "data": {
        # fmnist: IDX files under --data; synth-fmnist: generated images; ecg / spike: generated sequences
        "source": "fmnist",
        "preset": "fmnist-desk-v1",
        "n_sequences": 2000,
        "length": 80,
        "gain": 20.0,
        "n_channels": 16,
        "data_seed": 0,  # generated data stays fixed across training seeds
    },
    # the training seed is the top-level "seed"
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "eval": {
        "zetas": [0.0, 0.1, 0.2, 0.3, 0.5, 0.7],
        "n_samples": 20,
        "n_steps": 10,
        "eps_init": 0.01,
        "batch_size": 256,
        "landscape_zeta": 0.2,
        "n_trials": 5,
        "n_alphas": 41,
        "n_bins": 60,
        "n_examples": 200,
    },
    "verify": {"zetas": [0.0, 1e-4, 1e-3, 1e-2], "batch_size": 256},
    "gradcheck": {"step": 1e-5, "tolerance": 1e-4},
    "output": {"svg": False},
}

# sections whose keys are checked against the defaults
_CLOSED = ("data", "train", "eval", "verify", "gradcheck", "output")


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


def validate(cfg: dict) -> dict:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec in _CLOSED:
        if not isinstance(cfg.get(sec), dict):
            raise ConfigError(f"section {sec!r} must be an object")
        extra = set(cfg[sec]) - set(DEFAULTS[sec])
        if extra:
            raise ConfigError(f"unknown keys in {sec!r}: {sorted(extra)}")
    extra = set(cfg["train"]["attack"]) - set(DEFAULTS["train"]["attack"])
    if extra:
        raise ConfigError(f"unknown keys in 'train.attack': {sorted(extra)}")
    if cfg["model"].get("kind") not in ("mlp", "cnn", "srnn"):
        raise ConfigError(f"model.kind must be mlp, cnn or srnn, got {cfg['model'].get('kind')!r}")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train section: {e}") from e
    if cfg["data"]["source"] not in ("fmnist", "synth-fmnist", "ecg", "spike"):
        raise ConfigError(f"unknown data.source {cfg['data']['source']!r}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["attack"] = AttackConfig(**t["attack"])
    t["seed"] = cfg["seed"]
    return TrainConfig(**t)


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> dict:
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override path {dotted!r}")
    out = copy.deepcopy(cfg)
    node = out
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a section")
        node = node[k]
    node[keys[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        cfg = _merge(cfg, user)
    for dotted, value in overrides:
        cfg = apply_override(cfg, dotted, value)
    return validate(cfg)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"
