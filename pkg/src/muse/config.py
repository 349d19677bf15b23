"""Flat ``key=value`` experiment configs with per-command schemas."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        out[key] = value
    return out


def read_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text())


def floats(s: str) -> list:
    return [float(v) for v in s.split(",") if v.strip()]


def ints(s: str) -> list:
    return [int(v) for v in s.split(",") if v.strip()]


def boolean(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


class Key:
    def __init__(self, parse=str, default=None, required=False, path=False, choices=None):
        self.parse, self.default, self.required = parse, default, required
        self.path, self.choices = path, choices


def validate(raw: dict, schema: dict, base_dir=None) -> dict:
    """Type-convert ``raw`` against ``schema``.

    Unknown keys, missing required keys, unparsable values and
    non-existent path values all raise ``ConfigError`` naming the key.
    """
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}", key)
    out = {}
    for key, spec in schema.items():
        if key not in raw or raw[key] == "":
            if spec.required:
                raise ConfigError(f"missing required config key {key!r}", key)
            out[key] = spec.default
            continue
        try:
            value = spec.parse(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from exc
        if spec.choices is not None and value not in spec.choices:
            raise ConfigError(f"{key!r} must be one of {sorted(spec.choices)}, got {value!r}", key)
        if spec.path:
            value = resolve_path(value, base_dir)
            if not Path(value).exists():
                raise ConfigError(f"path for {key!r} does not exist: {value}", key)
        out[key] = value
    return out


def resolve_path(value: str, base_dir=None) -> str:
    p = Path(value)
    if not p.is_absolute() and base_dir is not None and (Path(base_dir) / p).exists():
        p = Path(base_dir) / p
    return str(p)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
