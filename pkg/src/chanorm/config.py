"""Canonical ``key=value`` text for dataclass configs.

One ``key=value`` per line, keys sorted, values in their ``repr``-free
plain form.  Parsing is strict: unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def dump_kv(values: dict) -> str:
    return "".join(f"{k}={_fmt(values[k])}\n" for k in sorted(values))


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if origin is tuple:
            (inner, *_) = typing.get_args(tp)
            return tuple(_coerce(p, inner, key) for p in raw.split(",") if p.strip())
        if tp in (str, "str"):
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    return raw


def from_kv(cls, values: dict[str, str], strict: bool = True):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown and strict:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
