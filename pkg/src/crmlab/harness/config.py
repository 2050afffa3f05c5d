"""Pipeline configuration: YAML file merged over documented defaults.

``seed`` and ``variants`` must be given explicitly; every other key falls back
to ``DEFAULTS``. Unknown keys are rejected so typos cannot silently fall back
to a default.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

import numpy as np
import yaml

from crmlab.errors import ConfigError

REQUIRED = ("seed", "variants")

DEFAULTS: dict = {
    "world": {
        "n_users": 500,
        "n_items": 2000,
        "latent_dim": 16,
        "alpha": 2.0,
        "beta": 0.0,
        "min_duration": 5.0,
        "max_duration": 300.0,
    },
    "sessions": {
        "sessions_per_user": 4,
        "session_len": 10,
        "temperature": 0.1,
        "candidate_size": 500,
        "sigma": 0.15,
        "daily_amplitude": 1.0,
    },
    "data": {"max_seq_len": 32, "batch_size": 256},
    "model": {
        "dim": 32,
        "hidden": [64],
        "output_dim": 32,
        "temperature": 0.1,
        "n_layers": 2,
        "n_heads": 2,
        "user_dim": 8,
        "share_item_embeddings": False,
    },
    "train": {"epochs": 10, "lr": 0.003, "optimizer": "adam"},
    "index": {"variant": "exact", "n_clusters": 64, "n_probe": 8},
    "eval": {
        "ks": [10, 50, 100],
        "watch_k": 50,
        "window": 32,
        "conditions": ["avg", "max", "mux:0.3"],
        "sweep_grid": [4, 8, 16, 32, 64, 128, 256],
    },
    "trace": {
        "n_users": 200,
        "days": 2,
        "sessions_per_day": 24,
        "session_len": 4,
        "window": 32,
    },
}

HELP = {
    "seed": "master seed; every stage derives its own stream from it",
    "variants": "list drawn from baseline, crm_dnn, crm_dt",
    "world.*": "simulator size, latent dim, watch-time link (alpha, beta) and duration range in seconds",
    "sessions.*": "per-user session count/length, item-choice temperature, candidate sample, watch noise sigma, "
                  "time-of-day long-video preference",
    "data.*": "history window (max_seq_len) and batch size",
    "model.*": "embedding dim, MLP hidden sizes, output dim, softmax temperature, transformer depth/heads, "
               "user-id embedding dim, item-table sharing",
    "train.*": "epochs, learning rate, optimizer (adam|sgd)",
    "index.*": "exact or ivf, with IVF cluster and probe counts",
    "eval.*": "hit-rate cut-offs, K for mean oracle watch time, policy window, conditions, sweep grid (seconds)",
    "trace.*": "users, simulated days and hourly sessions used for the daily condition trace",
}


def describe_defaults() -> str:
    lines = ["Config keys (defaults):", f"  seed (required): {HELP['seed']}", f"  variants (required): {HELP['variants']}"]
    for section, values in DEFAULTS.items():
        lines.append(f"  {section}: {HELP[section + '.*']}")
        for key, value in values.items():
            lines.append(f"    {section}.{key} = {value!r}")
    return "\n".join(lines)


def resolve_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing config key: {key!r}")
    unknown = set(raw) - set(REQUIRED) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if section in REQUIRED:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown key(s) in {section!r}: {sorted(bad)}")
        cfg[section].update(values)
    cfg["seed"] = int(raw["seed"])
    variants = raw["variants"]
    if isinstance(variants, str):
        variants = [variants]
    from crmlab.models import VARIANTS

    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    cfg["variants"] = list(variants)
    if sorted(cfg["eval"]["sweep_grid"]) != list(cfg["eval"]["sweep_grid"]) or not cfg["eval"]["sweep_grid"]:
        raise ConfigError("eval.sweep_grid must be a non-empty ascending list")
    return cfg


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-stage seed from the master seed and a stage name."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


def dump_config(cfg: dict, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
