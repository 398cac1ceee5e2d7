"""Run configuration: profiles, ``key = value`` files and flag overrides."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .training import TrainSettings


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text: str):
    return None if str(text).strip() in ("", "none") else str(text).strip()


SCHEMA = {
    # model
    "layers": int, "hidden": int, "kernel": int, "tau": int, "theta": int,
    "downsample": int, "in_channels": int, "residual_enabled": _bool,
    "residual_gates": _bool, "shared_encoder": _bool, "lambda1": float,
    "lambda2": float, "disc_layers": int, "k_tap": int,
    # optimiser / training
    "lr": float, "beta1": float, "beta2": float, "eps_adam": float,
    "steps": int, "batch": int, "context": int, "loss": str, "seed": int,
    # data
    "data": _opt_str, "n_seqs": int, "frames": int, "size": int, "n_objects": int,
    # execution
    "threads": int,
}

_DESK = {
    **ModelConfig().to_dict(),
    "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps_adam": 1e-8,
    "steps": 500, "batch": 8, "context": 4, "loss": "mse", "seed": 0,
    "data": None, "n_seqs": 8, "frames": 5, "size": 32, "n_objects": 1,
    "threads": 1,
}

PROFILES = {
    "desk": _DESK,
    "paper": {**_DESK, "layers": 16, "hidden": 128, "kernel": 5, "tau": 5, "theta": 5, "size": 512},
}


def parse_value(key: str, text) -> object:
    if key not in SCHEMA:
        raise KeyError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key](text) if isinstance(text, str) else text
    except ValueError as exc:
        raise ValueError(f"bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc.args[0]}") from None
    return out


def load_run_config(profile: str = "desk", path=None, overrides: dict | None = None) -> dict:
    """Profile defaults, then the config file, then explicit overrides."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = dict(PROFILES[profile])
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        cfg[key] = parse_value(key, value)
    return cfg


def model_config(run: dict) -> ModelConfig:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in run.items() if k in names})


def train_settings(run: dict) -> TrainSettings:
    return TrainSettings(steps=run["steps"], loss_mode=run["loss"], batch=run["batch"],
                         context=run["context"], seed=run["seed"], lr=run["lr"],
                         beta1=run["beta1"], beta2=run["beta2"], eps_adam=run["eps_adam"])
