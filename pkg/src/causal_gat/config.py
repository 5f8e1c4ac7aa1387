"""Strict JSON <-> nested dataclass conversion, dotted overrides and config digests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from typing import Any


class ConfigError(ValueError):
    """Malformed configuration: unknown key, wrong type or invalid value."""


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def digest(cfg) -> str:
    """sha256 of the canonical JSON form of a config dataclass."""
    data = to_dict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        errors = []
        for opt in options:
            if opt is type(None):
                continue
            try:
                return _coerce(opt, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (item,) = typing.get_args(tp) or (Any,)
        return [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping; unknown keys are errors, missing keys take defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {path + key!r}")
    kwargs = {k: _coerce(hints[k], v, path + k) for k, v in data.items()}
    return cls(**kwargs)


def parse_value(text: str):
    """JSON literal when it parses, bare string otherwise (``name=abc`` needs no quotes)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides, template: dict) -> dict:
    """Apply ``key.path=value`` strings to a nested dict; paths must exist in ``template``."""
    out = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node, ref = out, template
        for i, part in enumerate(parts):
            if not isinstance(ref, dict) or part not in ref:
                raise ConfigError(f"unknown config key {key.strip()!r}")
            if i == len(parts) - 1:
                node[part] = parse_value(raw)
            else:
                node = node.setdefault(part, {})
                ref = ref[part]
    return out


def load(cls, text: str | None = None, overrides=()):
    """Defaults of ``cls``, updated by a JSON document and then by overrides."""
    template = to_dict(cls())
    data = {}
    if text is not None:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        from_dict(cls, data)     # reject unknown keys before merging
    merged = _merge(template, data)
    merged = apply_overrides(merged, overrides, template)
    return from_dict(cls, merged)


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
