"""Key-value config files.

Files are plain ``key = value`` lines; ``#`` starts a comment.  Section headers
are optional and ignored, so one file can configure several stages.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Mapping, TypeVar

from .errors import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    out: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key.strip()] = value.strip()
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_kv_text(text)


def coerce(value: str, like: Any) -> Any:
    """Convert ``value`` to the type of the example value ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"expected {type(like).__name__}, got {value!r}") from exc
    if isinstance(like, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if like:
            return tuple(coerce(p, like[0]) for p in parts)
        return tuple(parts)
    return value


def update_dataclass(obj: T, values: Mapping[str, str], prefix: str = "") -> T:
    """Return a copy of dataclass ``obj`` with matching keys overridden.

    Only keys that name a field (after stripping ``prefix``) are consumed;
    unknown keys are left for other consumers.
    """
    changes = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key in values and f.init:
            current = getattr(obj, f.name)
            if dataclasses.is_dataclass(current):
                continue
            changes[f.name] = coerce(values[key], current)
    return dataclasses.replace(obj, **changes) if changes else obj
