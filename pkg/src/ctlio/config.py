"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return raw


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(x)) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def apply_overrides(cfg, pairs: dict):
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    for key, raw in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(str(raw), getattr(cfg, key), key)
    return dataclasses.replace(cfg, **updates)


def load_config(cls, path=None, **overrides):
    cfg = cls()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = apply_overrides(cfg, parse_pairs(path.read_text(), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, {k: format_value(v) for k, v in overrides.items()})
    return cfg


def dump_config(cfg) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n"
                   for f in dataclasses.fields(cfg))
