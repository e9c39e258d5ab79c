"""Key-value configuration files and dotted overrides onto dataclasses.

File format: one ``section.key = value`` per line, ``#`` starts a comment.
"""
from __future__ import annotations

import dataclasses
import enum
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(text: str, current: Any, name: str):
    if isinstance(current, enum.Enum):
        cls = type(current)
        parse = getattr(cls, "parse", None)
        try:
            return parse(text) if parse else cls(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {type(current).__name__}") from None
    if isinstance(current, tuple):
        return tuple(float(p) for p in text.split(",") if p.strip())
    return text


def apply(obj, values: Mapping[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with dotted ``values`` applied.

    Unknown keys raise ConfigError.
    """
    fields = {f.name for f in dataclasses.fields(obj)}
    direct: dict[str, Any] = {}
    nested: dict[str, dict[str, str]] = {}
    for key, text in values.items():
        head, _, tail = key.partition(".")
        if head not in fields:
            raise ConfigError(f"unknown key {prefix + key!r}")
        current = getattr(obj, head)
        if tail:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(f"unknown key {prefix + key!r}")
            nested.setdefault(head, {})[tail] = text
        else:
            if dataclasses.is_dataclass(current):
                raise ConfigError(f"{prefix + key!r} is a section, not a value")
            direct[head] = _coerce(text, current, prefix + key)
    for head, sub in nested.items():
        direct[head] = apply(getattr(obj, head), sub, prefix + head + ".")
    try:
        return dataclasses.replace(obj, **direct)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def to_dict(obj) -> dict:
    """JSON-friendly dict of a (possibly nested) dataclass."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, enum.Enum):
            v = v.value if not isinstance(v.value, tuple) else v.name
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, data: Mapping[str, Any]):
    """Inverse of ``to_dict`` for the config dataclasses used here."""
    kwargs = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        current = getattr(defaults, f.name)
        if dataclasses.is_dataclass(current):
            v = from_dict(type(current), v)
        elif isinstance(current, enum.Enum):
            enum_cls = type(current)
            v = enum_cls[v] if isinstance(current.value, tuple) else enum_cls(v)
        elif isinstance(current, tuple):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)
