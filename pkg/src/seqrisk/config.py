"""Layered run configuration: built-in defaults < JSON file < --set overrides.

Every tunable the model and trainer consume lives here with its production
default, so a bare config reproduces the reference setup. Validation is
structural: unknown keys and type mismatches fail fast with the offending key
path.
"""

from __future__ import annotations

import copy
import hashlib
import json


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "precision": "float64",
    "labels": {
        # which CSV label value means overdue; AUC polarity flips if misread
        "positive_means": "overdue",
    },
    "data": {
        "tz_offset_minutes": 0,
        "strict_codes": False,
    },
    "session": {
        "gap_seconds": 3600,
        "min_events": 3,
        "max_sessions": 50,
        "max_events": 25,
    },
    "embed": {
        "dim": 10,
        "time_dim": 10,
        "log1p_amount": False,
    },
    "fan": {
        "use_bias": True,
        "field_aware": True,
    },
    "norm": {
        "epsilon": 1e-8,
    },
    "gru": {
        "hidden": 30,
        "time_aware": True,
        "user_item_aware": True,
    },
    "model": {
        "sessions": True,
        "flat_max_events": 200,
    },
    "mlp": {
        "widths": [50, 25, 2],
        "dropout": 0.6,
        "dropout_semantics": "keep",
    },
    "loss": {
        "mode": "ce_plus_symkl",
        "alpha_aux_init": 1.0,
        "clamp_eps": 1e-7,
    },
    "train": {
        "lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "batch_size": 64,
        "epochs": 5,
        "pretrain_epochs": 5,
        "val_fraction": 0.2,
        "clip_norm": 5.0,
        "strict": False,
        "class_weight": False,
        "aux_pretrain": True,
        "teacher_guidance": True,
        "upi_freeze": False,
    },
    "teacher": {
        "l2": 0.001,
        "max_iters": 10000,
        "grad_tol": 1e-6,
    },
    "scenario": {
        "n_users": 2000,
        "n_old_users": 0,
        "base_rate": 0.053,
        "brevity_coef": 0.0,
        "risk_coef": 0.0,
        "month_coef": 0.0,
        "noise_level": 0.0,
        "profile_rho": 0.55,
        "n_profile_features": 6,
        "sessions_mean": 8.0,
        "events_mean": 7.0,
        "loan_ts": 1623758400,
    },
}

# sections that shape the parameter arrays; their hash is frozen into checkpoints
MODEL_SECTIONS = ("embed", "fan", "norm", "gru", "model", "mlp", "loss", "session")


def _merge(base, extra, path=""):
    for key, value in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} expects a section")
            _merge(base[key], value, here)
        else:
            if isinstance(base[key], bool) != isinstance(value, bool):
                raise ConfigError(f"config key {here}: expected {type(base[key]).__name__}")
            if isinstance(base[key], (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"config key {here}: expected a number")
            if isinstance(base[key], str) and not isinstance(value, str):
                raise ConfigError(f"config key {here}: expected a string")
            if isinstance(base[key], list) and not isinstance(value, list):
                raise ConfigError(f"config key {here}: expected a list")
            base[key] = value


def _parse_override(spec):
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not key=value")
    key, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve(path=None, overrides=(), seed=None):
    """Build the effective config dict from defaults, a file, and overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        _merge(cfg, file_cfg)
    for spec in overrides:
        key, value = _parse_override(spec)
        section = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(section.get(part), dict):
                raise ConfigError(f"unknown config key: {key}")
            section = section[part]
        _merge(section, {parts[-1]: value}, ".".join(parts[:-1]))
    if seed is not None:
        cfg["seed"] = int(seed)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["precision"] not in ("float32", "float64"):
        raise ConfigError("precision: expected float32 or float64")
    if cfg["labels"]["positive_means"] not in ("overdue", "normal"):
        raise ConfigError("labels.positive_means: expected overdue or normal")
    if cfg["mlp"]["dropout_semantics"] not in ("keep", "drop"):
        raise ConfigError("mlp.dropout_semantics: expected keep or drop")
    if cfg["loss"]["mode"] not in ("plain_ce", "ce_plus_symkl"):
        raise ConfigError("loss.mode: expected plain_ce or ce_plus_symkl")
    widths = cfg["mlp"]["widths"]
    if len(widths) < 2 or widths[-1] != 2 or any(int(w) <= 0 for w in widths):
        raise ConfigError("mlp.widths: final layer must have 2 units")
    if not 0.0 < cfg["mlp"]["dropout"] < 1.0:
        raise ConfigError("mlp.dropout: expected a probability in (0, 1)")
    if cfg["session"]["min_events"] < 1:
        raise ConfigError("session.min_events: expected >= 1")


def keep_prob(cfg):
    p = float(cfg["mlp"]["dropout"])
    return p if cfg["mlp"]["dropout_semantics"] == "keep" else 1.0 - p


def config_hash(cfg, sections=MODEL_SECTIONS):
    view = {name: cfg[name] for name in sections if name in cfg}
    blob = json.dumps(view, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
