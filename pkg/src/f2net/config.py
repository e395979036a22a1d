"""Flat ``key = value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar

T = TypeVar("T")


def parse_flat(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_flat(path) -> Dict[str, str]:
    return parse_flat(Path(path).read_text())


def dump_flat(values: Mapping[str, Any]) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        lines.append(f"{key} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def _coerce(value: str, tp) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return _coerce(value, args[0])
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    return value


def from_flat(cls: Type[T], values: Mapping[str, str], strict: bool = False) -> T:
    """Build dataclass ``cls`` from string values, ignoring unknown keys unless ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    if strict:
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k]) for k, v in values.items() if k in names}
    return cls(**kwargs)


def to_flat(obj) -> Dict[str, Any]:
    return dataclasses.asdict(obj)


def digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()
