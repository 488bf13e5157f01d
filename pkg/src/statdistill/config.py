"""Pipeline configuration: one JSON document, deep-merged from defaults,
an optional config file, and CLI overrides. Every stage derives its own
sub-seed deterministically from the master seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError


def default_config() -> dict:
    """Desk-scale defaults (digits-16). The synthesis loss weights, decay,
    drop rate, and temperature follow the reference settings; iteration and
    epoch counts are scaled to toy datasets and freely overridable."""
    return {
        "seed": 0,
        "dataset": {"name": "digits-16", "train_size": 1024, "test_size": 512},
        "pool": ["tiny-resnet", "tiny-convnet-gn", "tiny-mobile", "tiny-shuffle"],
        "pretrain": {"epochs": 5, "lr": 0.1, "momentum": 0.9, "batch_size": 32,
                     "augment": True},
        "capture": {"n_p": 4, "batch_size": 50},
        "synthesis": {"iterations": 400, "lr": 0.05, "adam_betas": [0.5, 0.9],
                      "alpha": 0.8, "tau_dd": 4.0, "beta_dr": 0.4,
                      "w_bn": 0.01, "w_conv": 0.01, "w_dd": 1.0,
                      "ipc": 10, "init": "noise",
                      "batch_plan": {"mode": "reorder", "classes_per_batch": 5,
                                     "samples_per_class": 10}},
        "relabel": {"epochs": 60, "tau": 4.0, "use_ln": True, "augment": True},
        "evaluate": {"model": "tiny-convnet-gn", "epochs": 60, "optimizer": "sgd",
                     "lr": 0.02, "momentum": 0.9, "gamma": 0.15, "batch_size": 64},
        "previews": False,
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} expects a table")
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """defaults <- file <- overrides, failing on unknown keys."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        cfg = _deep_merge(cfg, file_cfg)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def stage_seed(master_seed: int, stage: str) -> int:
    """Deterministic 63-bit sub-seed for a named stage."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def apply_flag_overrides(cfg: dict, args) -> dict:
    """Map the CLI override flags onto config paths."""
    cfg = copy.deepcopy(cfg)
    synth = cfg["synthesis"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, target, key in [
        ("ipc", synth, "ipc"),
        ("alpha", synth, "alpha"),
        ("beta_dr", synth, "beta_dr"),
        ("tau_dd", synth, "tau_dd"),
        ("iterations", synth, "iterations"),
        ("wdd", synth, "w_dd"),
        ("wbn", synth, "w_bn"),
        ("wconv", synth, "w_conv"),
        ("gamma", cfg["evaluate"], "gamma"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            target[key] = value
    if getattr(args, "batch_plan", None) is not None:
        synth["batch_plan"]["mode"] = args.batch_plan
    if getattr(args, "ln", None) is not None:
        cfg["relabel"]["use_ln"] = args.ln == "on"
    return cfg
