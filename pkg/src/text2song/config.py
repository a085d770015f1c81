"""Layered run configuration: defaults < TOML file < MELODIST_* environment < flags."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import tomli

from .errors import ConfigurationError

ENV_PREFIX = "MELODIST_"

# Full-scale step counts for reference: svs 80k, v2a 60k, codec 150k.
DEFAULTS = {
    "run": {"seed": 0, "out": "runs/out", "force": False},
    "data": {"songs": 50, "song_seconds": 8.0, "seg_min": 6.0, "seg_max": 10.0, "n_svs_extra": 0,
             "exclude_svs_extra": False, "exclude_song_data": False, "workers": 1},
    "codec": {"steps": 2000, "lr": 5e-4, "batch_size": 4, "segment": 8000, "stem": "vocal"},
    "tritower": {"steps": 3000, "lr": 1e-4, "batch_size": 16, "tau": 0.2, "text_aug": True, "spec_aug": True,
                 "p_text_aug": 0.5, "crop_min": 0.5},
    "svs": {"steps": 2000, "lr": 1e-3, "batch_size": 8, "warmup": 100, "overfit": 0, "max_patches": 2048},
    "v2a": {"steps": 2000, "lr": 1e-3, "batch_size": 8, "warmup": 100, "overfit": 0, "max_patches": 2048},
    "generate": {"top_k": 30, "temperature": 0.8, "stage1_top_k": 30, "normalize": False, "prompt": ""},
    "paths": {"corpus": "", "vocal_codec": "", "accomp_codec": "", "tritower": "", "svs": "", "v2a": ""},
}


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"cannot read {value!r} as a boolean")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as e:
        raise ConfigurationError(f"cannot read {value!r} as {type(like).__name__}") from e
    return value


def _merge(base: dict, over: dict, source: str):
    for section, values in over.items():
        if section not in base or not isinstance(values, dict):
            raise ConfigurationError(f"{source}: unknown config section {section!r}")
        for key, v in values.items():
            if key not in base[section]:
                raise ConfigurationError(f"{source}: unknown key {section}.{key}")
            like = base[section][key]
            if isinstance(v, str) and not isinstance(like, str):
                v = _coerce(v, like)
            elif isinstance(like, float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            elif type(v) is not type(like):
                raise ConfigurationError(f"{source}: {section}.{key} should be {type(like).__name__}")
            base[section][key] = v


def env_overrides(environ=None) -> dict:
    """MELODIST_<SECTION>__<KEY>=value -> {section: {key: value}}."""
    out: dict = {}
    for name, value in (environ if environ is not None else os.environ).items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigurationError(f"{name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        out.setdefault(parts[0], {})[parts[1]] = value
    return out


def resolve_config(config_path=None, flags: dict | None = None, environ=None) -> dict:
    """Merge all layers; ``flags`` is {section: {key: value}} with None meaning unset."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            _merge(cfg, tomli.loads(p.read_text()), str(p))
        except tomli.TOMLDecodeError as e:
            raise ConfigurationError(f"{p}: {e}") from e
    _merge(cfg, env_overrides(environ), "environment")
    if flags:
        _merge(cfg, {s: {k: v for k, v in kv.items() if v is not None} for s, kv in flags.items()}, "flags")
    return cfg


def write_config(out_dir, cfg: dict) -> Path:
    p = Path(out_dir) / "config.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return p
