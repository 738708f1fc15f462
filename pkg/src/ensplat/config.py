"""Plain-text configuration files: INI sections of key = value pairs.

``load`` returns nested dicts of strings; typed readers raise ConfigError
naming the offending section.key. ``dumps`` re-serializes with sorted
sections and keys, so parse -> dump -> parse is the identity.
"""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

from .errors import ConfigError


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    return {section: dict(parser[section]) for section in parser.sections()}


def loads(text: str) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    return {section: dict(parser[section]) for section in parser.sections()}


def dumps(cfg: dict) -> str:
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for key in sorted(cfg[section]):
            lines.append(f"{key} = {cfg[section][key]}")
        lines.append("")
    return "\n".join(lines)


class Section:
    """Typed accessor over one config section."""

    def __init__(self, cfg: dict, name: str):
        self.name = name
        self.data = cfg.get(name, {})

    def _get(self, key, default):
        if key in self.data:
            return self.data[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing required config key {self.name}.{key}")
        return default

    def str(self, key, default=None):
        v = self._get(key, default)
        return None if v is None else str(v)

    def int(self, key, default=None):
        v = self._get(key, default)
        if v is None:
            return None
        try:
            return int(str(v))
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected integer, got {v!r}") from None

    def float(self, key, default=None):
        v = self._get(key, default)
        if v is None:
            return None
        try:
            return float(str(v))
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected number, got {v!r}") from None

    def bool(self, key, default=None):
        v = self._get(key, default)
        if isinstance(v, bool) or v is None:
            return v
        s = str(v).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.name}.{key}: expected boolean, got {v!r}")

    def points(self, key, default=None):
        """Semicolon-separated list of comma/space-separated vectors."""
        v = self._get(key, default)
        if v is None or (isinstance(v, str) and not v.strip()):
            return np.zeros((0, 0))
        rows = []
        for chunk in str(v).split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append([float(x) for x in chunk.replace(",", " ").split()])
            except ValueError:
                raise ConfigError(f"{self.name}.{key}: bad vector {chunk!r}") from None
        if not rows:
            return np.zeros((0, 0))
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ConfigError(f"{self.name}.{key}: inconsistent vector lengths")
        return np.asarray(rows, dtype=np.float64)

    def floats(self, key, default=None):
        v = self._get(key, default)
        if v is None:
            return None
        try:
            return [float(x) for x in str(v).replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected numbers, got {v!r}") from None


_REQUIRED = object()


def require(cfg: dict, section: str, key: str) -> str:
    try:
        return cfg[section][key]
    except KeyError:
        raise ConfigError(f"missing required config key {section}.{key}") from None
