"""Single-file checkpoint archive: versioned config plus named tensors."""
from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .errors import ConfigurationError, MissingPrerequisiteError

SCHEMA_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, tensors: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, kind: str | None = None, what: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingPrerequisiteError(f"missing {what or 'checkpoint'}: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint schema {payload.get('schema_version')}")
    if kind is not None and payload.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
