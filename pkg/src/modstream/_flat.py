"""Flat ``key = value`` text files typed by a dataclass schema."""

from __future__ import annotations

import dataclasses
import types
import typing


class ConfigError(ValueError):
    pass


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def dumps(obj) -> str:
    return "".join(f"{f.name} = {format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def parse(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(inner[0], raw, key)
    if origin in (tuple, list):
        elem = args[0] if args else str
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_coerce(elem, s, key) for s in items)
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {tp.__name__}") from None
    return raw


def build(cls, values: dict[str, str], *, strict: bool = True):
    """Instantiate dataclass ``cls`` from string values, coercing by annotation."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(hints[k], v, k) for k, v in values.items() if k in names}
    return cls(**kwargs)
