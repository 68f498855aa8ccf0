"""Nested run configuration: TOML file + dotted ``key=value`` overrides.

Every key must already exist in :data:`DEFAULTS`; unknown keys are rejected.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .message_passing import AggregationStrategy
from .model import ModelConfig
from .trainer import TaskSpec, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "model": {
        "layers": 4, "d_model": 64, "heads": 4, "ffn_hidden": 256, "vocab": 64,
        "enc_tokens": 16, "enc_in": 16, "max_len": 32,
    },
    "adapter": {
        "kind": "adapter", "hidden": 8, "positions": ["ffn", "sa", "ca"],
        "p_mode": "learnable", "p": 1.5, "mu": 1.0, "eps": 1e-8,
        "concat_mode": "query", "aggregation": "p_laplacian",
        "appnp_alpha": 0.1, "appnp_steps": 2, "gcnii_alpha": 0.1, "gcnii_beta": 0.5,
    },
    "task": {
        "kind": "copy_shift", "length": 8, "vocab": 16, "n_train": 512, "n_eval": 128,
        "shift": 1, "n_keys": 16, "n_classes": 4, "key_dim": 8, "label_noise": 0.0,
    },
    "train": {"steps": 500, "lr": 1e-2, "weight_decay": 0.05, "batch_size": 16, "eval_every": 100},
    "spectral": {"n_query": 16, "n_value": 16, "dim": 16, "separation": 3.0, "noise": 1.0,
                 "mu": 1.0, "p_list": [1.25, 1.5, 1.75, 2.0], "seed": 11},
    "dump": {"layer": -1, "which": "ca", "example": 0, "row": 0},
    "ablation": {"steps": 150, "grids": ["p_mu", "positions", "widths", "concat", "aggregation"]},
}

# Ablation grids, each applied on top of the base config.
ABLATION_GRIDS: dict = {
    "p_mu": {"adapter.kind": ["p_adapter"], "adapter.p_mode": ["fixed"],
             "adapter.p": [1.25, 1.5, 1.75], "adapter.mu": [0.1, 1.0, 10.0]},
    "positions": {"adapter.kind": ["p_adapter"],
                  "adapter.positions": [["ffn"], ["ffn", "sa"], ["ffn", "ca"], ["ffn", "sa", "ca"]]},
    "widths": {"adapter.kind": ["p_adapter"], "adapter.hidden": [8, 4, 2, 1]},
    "concat": {"adapter.kind": ["p_adapter"], "adapter.concat_mode": ["query", "zero", "noise"]},
    "aggregation": {"adapter.kind": ["p_adapter"],
                    "adapter.aggregation": ["gcn", "appnp", "gcnii", "p_laplacian"]},
}


def _parse_scalar(text: str):
    """Parse an override value as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(base: dict, new: dict, prefix: str = "") -> None:
    for k, v in new.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a table")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        set_dotted(cfg, key.strip(), _parse_scalar(text.strip()))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def apply_cell(cfg: dict, cell: dict) -> dict:
    out = copy.deepcopy(cfg)
    for k, v in cell.items():
        set_dotted(out, k, copy.deepcopy(v))
    return out


def model_config(cfg: dict) -> ModelConfig:
    m, a = cfg["model"], cfg["adapter"]
    try:
        agg = AggregationStrategy(kind=a["aggregation"], appnp_alpha=a["appnp_alpha"], appnp_steps=a["appnp_steps"],
                                  gcnii_alpha=a["gcnii_alpha"], gcnii_beta=a["gcnii_beta"])
        return ModelConfig(
            layers=m["layers"], d_model=m["d_model"], heads=m["heads"], ffn_hidden=m["ffn_hidden"],
            vocab=m["vocab"], enc_tokens=m["enc_tokens"], enc_in=m["enc_in"], max_len=m["max_len"],
            adapter_kind=a["kind"], adapter_hidden=a["hidden"], positions=tuple(a["positions"]),
            p_mode=a["p_mode"], p=float(a["p"]), mu=float(a["mu"]), eps=float(a["eps"]),
            concat_mode=a["concat_mode"], aggregation=agg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model/adapter config: {exc}") from None


def task_spec(cfg: dict) -> TaskSpec:
    t = cfg["task"]
    try:
        return TaskSpec(kind=t["kind"], length=t["length"], vocab=t["vocab"], n_train=t["n_train"],
                        n_eval=t["n_eval"], seed=cfg["seed"], shift=t["shift"], n_keys=t["n_keys"],
                        n_classes=t["n_classes"], key_dim=t["key_dim"], label_noise=float(t["label_noise"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid task config: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=int(t["steps"]), lr=float(t["lr"]), weight_decay=float(t["weight_decay"]),
                       batch_size=int(t["batch_size"]), eval_every=int(t["eval_every"]), seed=int(cfg["seed"]))


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
