"""Flat run configuration: documented keys, YAML files, presets, hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

from .trainer import TrainConfig

KEY_DOCS = {
    "env": "environment preset: climb | penalty | coopgrid",
    "algorithm": "qmix | owqmix",
    "seed": "master seed; drives init, exploration, sampling and the env",
    "total_steps": "environment steps in the run (desk-scale default)",
    "warmup_steps": "no gradient updates or evolution before this many steps",
    "epsilon_initial": "exploration rate at step 0",
    "epsilon_final": "exploration rate after annealing",
    "epsilon_anneal_steps": "linear anneal horizon for epsilon",
    "eval_interval_steps": "greedy evaluation cadence in env steps",
    "eval_episodes": "episodes per greedy evaluation",
    "lr": "RMSProp learning rate",
    "rmsprop_smoothing": "RMSProp squared-gradient smoothing",
    "rmsprop_epsilon": "RMSProp denominator constant",
    "grad_clip_norm": "global gradient-norm clip; 0 disables",
    "gamma": "discount factor",
    "target_update_episodes": "episodes between target-network syncs",
    "buffer_capacity_offline": "large FIFO buffer capacity (episodes)",
    "buffer_capacity_online": "small recent-only FIFO capacity (episodes)",
    "batch_offline": "episodes sampled per update from the large buffer",
    "batch_online": "episodes sampled per update from the recent buffer",
    "sparsity": "fraction of weight-matrix entries forced to zero",
    "evolve": "enable drop/grow topology evolution",
    "zeta0": "initial mask-update fraction of the cosine schedule",
    "evolve_interval_episodes": "episodes between mask updates",
    "evolve_stop_frac": "fraction of total_steps after which evolution freezes",
    "group_mode": "pooled (one budget per network family) | per_layer",
    "share_agent_params": "one agent network shared by all agents",
    "agent_hidden": "agent net hidden width (also the GRU size)",
    "mixer_embed": "mixing-network embed dimension",
    "hypernet_hidden": "hypernetwork hidden width",
    "unrestricted_embed": "unrestricted mixer embed dimension",
    "operator": "max | softmax | mellowmax | soft_mellowmax",
    "sm_alpha": "soft-mellowmax weighting exponent",
    "sm_omega": "soft-mellowmax temperature",
    "softmax_beta": "inverse temperature of the joint softmax baseline",
    "td_lambda": "TD(lambda) mixing weight after burn-in",
    "burn_in_steps": "one-step targets before this step; -1 = 3/8 of total",
    "double_dqn": "double-Q action selection for the max operator",
    "ow_alpha": "weighting applied to non-underestimated samples (owqmix)",
    "updates_per_episode": "gradient updates per completed episode",
}

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
assert set(KEY_DOCS) == set(_FIELDS), "every config key must be documented"

BATCH_SPLITS = {  # named b1:b2 presets, all scaled to a total batch of 32
    "8:0": (32, 0), "6:2": (24, 8), "5:3": (20, 12),
    "3:5": (12, 20), "2:6": (8, 24), "0:8": (0, 32),
}


class ConfigError(ValueError):
    pass


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(key: str, value):
    ftype = _FIELDS[key].type
    if ftype in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} expects a number, got {value!r}")
        return float(value)
    if ftype in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
        return int(value)
    if ftype in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"key {key!r} expects true/false, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"key {key!r} expects a string, got {value!r}")
    return value


def config_from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    unknown = set(data) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = config_to_dict(base) if base is not None else {}
    merged.update({k: _coerce(k, v) for k, v in data.items()})
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a flat key: value mapping")
    return data


def list_presets() -> list:
    pkg = resources.files("sparsemarl") / "configs"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".yaml"))


def preset_dict(name: str) -> dict:
    pkg = resources.files("sparsemarl") / "configs"
    path = pkg / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {list_presets()}")
    data = yaml.safe_load(path.read_text())
    return data or {}


def _expand_batch_split(data: dict) -> dict:
    """`batch_split: "6:2"` is shorthand for the named b1/b2 pairs."""
    if "batch_split" not in data:
        return data
    data = dict(data)
    name = str(data.pop("batch_split"))
    if name not in BATCH_SPLITS:
        raise ConfigError(f"unknown batch_split {name!r}; "
                          f"choose from {sorted(BATCH_SPLITS)}")
    b1, b2 = BATCH_SPLITS[name]
    data.setdefault("batch_offline", b1)
    data.setdefault("batch_online", b2)
    data["batch_offline"], data["batch_online"] = b1, b2
    return data


def build_config(preset: str | None = None, config_file=None,
                 overrides: dict | None = None) -> TrainConfig:
    """defaults < preset < config file < overrides."""
    data: dict = {}
    if preset:
        data.update(preset_dict(preset))
    if config_file:
        data.update(load_config_file(config_file))
    if overrides:
        data.update(overrides)
    data = _expand_batch_split(data)
    for k in data:
        if k not in _FIELDS:
            raise ConfigError(f"unknown config keys: ['{k}']")
    return config_from_dict(data)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def yaml_value(value) -> str:
    """A scalar literal that yaml.safe_load parses back to the same value."""
    return yaml.safe_dump(value, default_flow_style=True).strip().removesuffix("\n...")


def config_yaml(cfg: TrainConfig) -> str:
    lines = []
    for key in KEY_DOCS:
        value = getattr(cfg, key)
        lines.append(f"{key}: {yaml_value(value)}  # {KEY_DOCS[key]}")
    return "\n".join(lines) + "\n"


def describe_keys() -> str:
    default = TrainConfig()
    lines = [f"{k:<26} default={getattr(default, k)!r:<18} {v}"
             for k, v in KEY_DOCS.items()]
    return "\n".join(lines) + "\n"
