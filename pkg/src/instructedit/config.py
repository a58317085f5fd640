"""Flat key-value config files (YAML mappings of scalars) bound to dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from pathlib import Path

import yaml

from .exceptions import ConfigError

_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _coerce(name, value, type_name):
    kind = _TYPES.get(str(type_name).split("|")[0].strip())
    if kind is None:
        return value
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{name}: expected number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{name}: expected number, got {value!r}") from None
    if not isinstance(value, (str, int, float)):
        raise ConfigError(f"{name}: expected text, got {value!r}")
    return str(value)


def read_flat(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a flat mapping")
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"config keys must map to scalars: {nested}", nested)
    return data


def bind(cls, values: dict, overrides: dict | None = None):
    """Build ``cls`` from a flat mapping, reporting every bad key at once."""
    values = {**values, **(overrides or {})}
    known = {f.name: f for f in fields(cls)}
    problems = [f"{k}: unknown key" for k in values if k not in known]
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            continue
        try:
            kwargs[k] = _coerce(k, v, known[k].type)
        except ConfigError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems), problems)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(cls, path=None, overrides=None):
    return bind(cls, read_flat(path) if path else {}, overrides)


def dump_config(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {f.name: getattr(obj, f.name) for f in fields(obj)}
    path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")
    return path


def config_hash(obj) -> str:
    data = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

