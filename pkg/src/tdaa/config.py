"""Experiment configuration: documented defaults, JSON loading, validation."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

DEFAULTS = {
    "data": {
        "seed": 42,                 # Shapes10 variant A global seed
        "variant_b_seed": 1042,     # disjoint seed for style-shifted variant B
        "train_count": 4000,
        "test_count": 1000,
        "cifar10_dir": None,        # directory with data_batch_*.bin / test_batch.bin
        "audit_dumps": 10,          # PPM dumps per split written by gen-data
    },
    "pretrain": {
        "method": "simclr_lite",
        "methods": ["simclr_lite", "supcon_lite", "supervised_ce"],
        "temperature": 0.5,
        "batch_size": 128,
        "epochs": 30,
        "lr": 1e-3,
        "seed": 0,
        "dataset": "shapes10",
    },
    "attack": {
        "victim": "simclr_lite",
        "alpha": 2.0,
        "epsilon": 10 / 255,
        "eta": 1.0,
        "criterion": "l2",
        "infonce_temperature": 0.5,
        "lr": 2e-4,
        "batch_size": 64,
        "epochs": 20,
        "seed": 0,
        "attacker_dataset": "shapes10",
        "threat_image": "shapes10-train:0",
    },
    "downstream": {
        "dataset": "shapes10",
        "epochs": 20,
        "lr": 1e-3,
        "finetune_lr": 1e-4,
        "batch_size": 128,
        "seed": 0,
        "finetune": False,
    },
    "eval": {
        "batch_size": 500,
        "retrieval_k": 10,
        "alpha_grid": [2.0, 5.0, "inf"],
        "criteria": ["l2", "cosine", "infonce"],
        "transfer_methods": ["simclr_lite", "supcon_lite", "supervised_ce"],
        "project_count": 200,
        "dump_count": 8,
    },
    "output": {
        "report": "report.csv",
    },
}

DATASETS = ("shapes10", "shapes10b", "cifar10")
METHODS = ("simclr_lite", "supcon_lite", "supervised_ce")
CRITERIA = ("l2", "cosine", "infonce")
_ALPHA_KEYS = ("attack.alpha",)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


def _type_ok(default, value) -> bool:
    if default is None:
        return value is None or isinstance(value, str)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = merge(base[key], value, path + ".")
        else:
            if path in _ALPHA_KEYS and isinstance(value, str):
                out[key] = value  # "inf" drops the consistency term; checked in validate
                continue
            if not _type_ok(base[key], value):
                raise ConfigError(path, f"expected {type(base[key]).__name__}, got {type(value).__name__}")
            out[key] = float(value) if isinstance(base[key], float) else value
    return out


def _alpha_ok(v) -> bool:
    if isinstance(v, str):
        return v.lower() in ("inf", "infinity")
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0 and not math.isnan(v)


def validate(cfg: dict) -> dict:
    d, p, a, s, e = cfg["data"], cfg["pretrain"], cfg["attack"], cfg["downstream"], cfg["eval"]
    checks = [
        ("data.train_count", d["train_count"] > 0 and d["train_count"] % 10 == 0, "positive multiple of 10"),
        ("data.test_count", d["test_count"] > 0 and d["test_count"] % 10 == 0, "positive multiple of 10"),
        ("data.seed", 0 <= d["seed"] < 2**64, "must be a u64"),
        ("pretrain.method", p["method"] in METHODS, f"one of {METHODS}"),
        ("pretrain.methods", all(m in METHODS for m in p["methods"]), f"entries from {METHODS}"),
        ("pretrain.temperature", p["temperature"] > 0, "must be > 0"),
        ("pretrain.epochs", p["epochs"] >= 1, "must be >= 1"),
        ("pretrain.batch_size", p["batch_size"] >= 2, "must be >= 2"),
        ("pretrain.dataset", p["dataset"] in DATASETS, f"one of {DATASETS}"),
        ("attack.victim", a["victim"] in METHODS, f"one of {METHODS}"),
        ("attack.alpha", _alpha_ok(a["alpha"]), "a number >= 0 or \"inf\""),
        ("attack.epsilon", 0 < a["epsilon"] < 1, "must lie in (0, 1)"),
        ("attack.eta", a["eta"] > 0, "must be > 0"),
        ("attack.criterion", a["criterion"] in CRITERIA, f"one of {CRITERIA}"),
        ("attack.epochs", a["epochs"] >= 1, "must be >= 1"),
        ("attack.batch_size", a["batch_size"] >= 1, "must be >= 1"),
        ("attack.attacker_dataset", a["attacker_dataset"] in DATASETS, f"one of {DATASETS}"),
        ("downstream.dataset", s["dataset"] in DATASETS, f"one of {DATASETS}"),
        ("downstream.epochs", s["epochs"] >= 1, "must be >= 1"),
        ("eval.retrieval_k", e["retrieval_k"] >= 1, "must be >= 1"),
        ("eval.alpha_grid", all(_alpha_ok(v) for v in e["alpha_grid"]), "numbers >= 0 or \"inf\""),
        ("eval.criteria", all(c in CRITERIA for c in e["criteria"]), f"entries from {CRITERIA}"),
        ("eval.transfer_methods", all(m in METHODS for m in e["transfer_methods"]), f"entries from {METHODS}"),
    ]
    for key, ok, what in checks:
        if not ok:
            raise ConfigError(key, f"invalid value ({what})")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "expected an object")
        cfg = merge(cfg, raw)
    if overrides:
        cfg = merge(cfg, overrides)
    return validate(cfg)


def canonical(cfg) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
