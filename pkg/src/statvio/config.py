"""Flat key-value configuration files.

Format: ``key = value`` lines, ``#`` comments, optional ``[section]``
headers that group keys cosmetically (keys must be globally unique).
Values stay strings here; consumers coerce and validate.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_text(path.read_text(), source=str(path))


def as_float(mapping: dict[str, str], key: str, default: float) -> float:
    if key not in mapping:
        return default
    try:
        return float(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: not a number: {mapping[key]!r}") from exc


def as_int(mapping: dict[str, str], key: str, default: int) -> int:
    if key not in mapping:
        return default
    try:
        return int(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: not an integer: {mapping[key]!r}") from exc


def as_floats(mapping: dict[str, str], key: str, default):
    if key not in mapping:
        return default
    try:
        return [float(tok) for tok in mapping[key].split()]
    except ValueError as exc:
        raise ConfigError(f"{key}: not a number list: {mapping[key]!r}") from exc
