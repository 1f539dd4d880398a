"""Run configuration: nested key/value trees with strict key checking.

Configs are plain YAML mappings (safe-loaded, never executed). Unknown keys
are rejected against the default tree so typos fail fast, and every run
artifact embeds the hash of its resolved config.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

from .errors import ConfigError

# Model-size and training defaults follow the reference configuration
# (backbone 384/6/8, transformer 384/12/6, AdamW 1e-4 with clip 1.0,
# sigma in [0.01, 10]). cond_dim null means "infer from the slides".
DEFAULTS: dict = {
    "mode": "flag",                   # flag | joint | node_only
    "schedule": {"sigma_min": 0.01, "sigma_max": 10.0},
    "backbone": {
        "hidden": 384,
        "layers": 6,
        "heads": 8,
        "cond_dim": None,
        "alpha_init": 0.1,
        "gamma_init": 0.1,
    },
    "dit": {
        "hidden": 384,
        "layers": 12,
        "heads": 6,
        "mlp_ratio": 4.0,
        "gene_dim": 512,
        "align_layer": 8,
    },
    "graph": {
        "length_scale": 224.0,
        "knn_k": 8,
        "edge_channels": ["dist", "img"],
    },
    "train": {
        "steps": 1000,
        "lr": 1e-4,
        "weight_decay": 0.01,
        "grad_clip": 1.0,
        "lambda_align": 0.5,
        "lambda_c": 1.0,
        "seed": 0,
        "checkpoint_every": 0,        # 0: final checkpoint only
    },
    "sample": {"steps": 100, "seed": 0},
}

VALID_MODES = ("flag", "joint", "node_only")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def resolve_config(*overrides: dict | None) -> dict:
    """Defaults merged with successive override layers (later wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    for layer in overrides:
        if layer:
            cfg = _merge(cfg, layer)
    if cfg["mode"] not in VALID_MODES:
        raise ConfigError(f"mode must be one of {VALID_MODES}, got {cfg['mode']!r}")
    return cfg


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        loaded = yaml.safe_load(fh)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: config must be a mapping at the top level")
    return loaded


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def format_config(cfg: dict, indent: int = 0) -> str:
    """Human-readable key: value rendering for run logs."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        pad = "  " * indent
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(format_config(value, indent + 1))
        else:
            lines.append(f"{pad}{key}: {value}")
    return "\n".join(lines)
