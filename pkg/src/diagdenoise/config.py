"""Run configuration: defaults < JSON config file < command-line flags.

Every key is validated against the schema below; unknown keys are errors so
typos fail fast instead of silently using defaults.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

#: key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    # noise schedule
    "shift_k": (float, 5.0),
    "horizon_T": (int, 1000),
    "warp_enabled": (bool, True),
    # rolling cache / diagonal forcing
    "window_chunks": (int, 4),
    "forcing_t": (int, 100),
    "forcing_vp_form": (bool, False),
    "strict_noisy_cache": (bool, True),
    # toy denoiser
    "d_model": (int, 16),
    "layers": (int, 2),
    "heads": (int, 2),
    "frames_per_chunk": (int, 3),
    "channels": (int, 4),
    "height": (int, 8),
    "width": (int, 8),
    "model_seed": (int, 0),
    # pipeline
    "base_phase_chunks": (int, 4),
    "auto_phase": (bool, True),
    "mix_outputs": (bool, True),
    "mix_last": (bool, True),
    "deterministic_renoise": (bool, False),
    "timestep_policy": (str, "linear"),
    # accounting
    "nfe_multiplier": (int, 2),
    "cost_per_forward": (float, 1.0),
    # motion features
    "flow_repr": (str, "learned"),
    "ema_mu": (float, 0.999),
    "c_mid": (int, 8),
    "c_feat": (int, 4),
    # run
    "seed": (int, 42),
}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    cfg = {k: v for k, (_, v) in SCHEMA.items()}
    env_seed = os.environ.get("DIAG_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"DIAG_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def validate_keys(data: dict, source: str) -> dict:
    out = {}
    for key, value in data.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} in {source}")
        want, _ = SCHEMA[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if want is int and isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be {want.__name__}")
        if not isinstance(value, want):
            raise ConfigError(
                f"config key {key!r} must be {want.__name__}, got {type(value).__name__}")
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Merged configuration; overrides beat the file, the file beats defaults."""
    cfg = default_config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update(validate_keys(data, str(path)))
    if overrides:
        cfg.update(validate_keys(overrides, "command line"))
    return cfg
