"""Flat ``key = value`` config files."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_file(path) -> dict[str, str]:
    return parse_text(Path(path).read_text(encoding="utf-8"))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(record) -> str:
    lines = [f"{f.name} = {format_value(getattr(record, f.name))}"
             for f in dataclasses.fields(record)]
    return "\n".join(lines) + "\n"


def _coerce(raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        return _coerce(raw, inner[0])
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if origin in (tuple, list):
        elem = args[0] if args else str
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_coerce(s, elem) for s in items)
    return raw


def build(cls, values: dict[str, str], strict: bool = True):
    """Instantiate dataclass ``cls`` from string values; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        if key in names:
            try:
                kwargs[key] = _coerce(raw, hints[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    return cls(**kwargs)
