"""Flat ``key=value`` views of configuration dataclasses.

Nested dataclasses flatten to dotted keys (``quantizer.K``). Parsing is
strict: unknown keys and malformed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(tp, text: str, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("none", "null", ""):
            return None
        return _parse(args[0], text, key)
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {getattr(tp, '__name__', tp)})") from None
    raise ConfigError(f"unsupported config field type {tp} for {key}")


def to_flat(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = _format(value)
    return out


def known_keys(cls, prefix: str = "") -> set[str]:
    hints = typing.get_type_hints(cls)
    keys: set[str] = set()
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            keys |= known_keys(tp, prefix + f.name + ".")
        else:
            keys.add(prefix + f.name)
    return keys


def from_flat(cls, flat: dict[str, str], prefix: str = "", base=None):
    """Build ``cls`` from flat keys under ``prefix``, starting from ``base`` (or defaults)."""
    relevant = {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}
    unknown = set(relevant) - known_keys(cls)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    hints = typing.get_type_hints(cls)
    obj = base if base is not None else cls()
    changes = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub = {k: v for k, v in relevant.items() if k.startswith(f.name + ".")}
            if sub:
                changes[f.name] = from_flat(tp, sub, f.name + ".", getattr(obj, f.name))
        elif f.name in relevant:
            changes[f.name] = _parse(tp, relevant[f.name], prefix + f.name)
    return dataclasses.replace(obj, **changes)


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_text(flat: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in flat.items())


def read_file(path) -> dict[str, str]:
    return parse_text(Path(path).read_text(encoding="utf-8"))
