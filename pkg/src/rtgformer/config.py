"""Run configuration files: documented defaults, strict keys, effective-config echo."""

from __future__ import annotations

import json
import os
from pathlib import Path

SEED_ENV_VAR = "RTGFORMER_SEED"

DEFAULTS = {
    "seed": 0,
    "env": {
        "grid_width": 7,
        "grid_height": 7,
    },
    "encoder": {
        "d_a": 64,
        "d_s": 64,
    },
    "model": {
        "d_model": 128,
        "n_heads": 1,
        "n_layers": 6,
        "context_len": 6,
        "rtg_mode": "condition",
        "memory_segments": 0,
        "dropout": 0.0,
        "max_position": 64,
    },
    "train": {
        "steps": 5000,
        "lr_peak": 3e-4,
        "warmup_steps": 500,  # paper scale: 10000
        "batch_tokens": 256,  # paper scale: 65536
        "eval_every": 0,
        "eval_episodes": 10,
        "grad_clip": 1.0,
        "weight_decay": 1e-4,
        "prompt_variant": "original",
    },
    "data": {
        "tiers": ["random", "medium", "expert"],
        "n_episodes": 5000,
    },
    "rollout": {
        "target_return": None,  # null = dataset expert mean return
        "n_episodes": 10,
        "query_mode": "rtg_only",
    },
    "ablation": {
        "seeds": [0, 1, 2],
        "levels": [],  # empty = axis defaults
        "dataset_episodes": 5000,
        "eval_episodes": 50,
        "steps": 1500,
        "warmup_steps": 150,
        "batch_tokens": 256,
        "d_model": 64,
        "n_layers": 2,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults, overrides, path=""):
    if not isinstance(overrides, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    merged = {}
    for key, default in defaults.items():
        if key in overrides and isinstance(default, dict):
            merged[key] = _merge(default, overrides[key], f"{path}{key}.")
        elif key in overrides:
            merged[key] = overrides[key]
        else:
            merged[key] = default
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s): "
                          f"{', '.join(path + k for k in sorted(unknown))}")
    return merged


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults merged with a config file, then with explicit overrides."""
    cfg = DEFAULTS
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    if cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get(SEED_ENV_VAR, "0"))
    return cfg


def echo_config(cfg: dict, out_dir) -> None:
    """Write the effective configuration next to every command's outputs."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "effective_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n")
