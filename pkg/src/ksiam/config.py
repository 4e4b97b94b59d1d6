"""Flat ``key = value`` configuration files mirroring TrainConfig.

Tiling keys are prefixed with ``tiling.``; role sets are comma separated.
Keys that do not belong to TrainConfig (dataset path, folds, ...) are kept
as plain strings so that a resolved snapshot can describe a whole command.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from collections.abc import Mapping
from pathlib import Path

from .data import Role, parse_roles
from .errors import ConfigError
from .tiling import TilingConfig
from .training import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "tiling")
TILING_KEYS = tuple(f"tiling.{f.name}" for f in dataclasses.fields(TilingConfig))
CONFIG_KEYS = TRAIN_KEYS + TILING_KEYS


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip().replace("-", "_")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def read_config(path: str | os.PathLike) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from None
    return parse_config_text(text, str(p))


def coerce(value: object, like: object, key: str) -> object:
    """Convert ``value`` (usually a string) to the type of the default ``like``."""
    try:
        if isinstance(like, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(like, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value) if not isinstance(value, str) else int(value.strip())
        if isinstance(like, float):
            return float(value)
        if isinstance(like, frozenset):
            return parse_roles(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {exc}") from None


def build_train_config(values: Mapping[str, object], base: TrainConfig | None = None) -> TrainConfig:
    """Apply known keys from ``values`` on top of ``base``; unknown keys are an error."""
    base = base or TrainConfig()
    unknown = sorted(k for k in values if k not in CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    top, tiling = {}, {}
    for key, value in values.items():
        if key.startswith("tiling."):
            name = key[len("tiling."):]
            tiling[name] = coerce(value, getattr(base.tiling, name), key)
        else:
            top[key] = coerce(value, getattr(base, key), key)
    if tiling:
        top["tiling"] = dataclasses.replace(base.tiling, **tiling)
    return dataclasses.replace(base, **top).validate()


def split_keys(values: Mapping[str, object]) -> tuple[dict[str, object], dict[str, object]]:
    """(TrainConfig keys, everything else)."""
    train = {k: v for k, v in values.items() if k in CONFIG_KEYS}
    other = {k: v for k, v in values.items() if k not in CONFIG_KEYS}
    return train, other


def _render(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, frozenset):
        return ",".join(sorted(r.value if isinstance(r, Role) else str(r) for r in value))
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def config_items(config: TrainConfig) -> list[tuple[str, str]]:
    items = [(k, _render(getattr(config, k))) for k in TRAIN_KEYS]
    items += [(k, _render(getattr(config.tiling, k.split(".", 1)[1]))) for k in TILING_KEYS]
    return items


def format_config(config: TrainConfig, extra: Mapping[str, object] | None = None, header: str | None = None) -> str:
    lines = [f"# {line}" for line in (header or "").splitlines()]
    lines += [f"{k} = {v}" for k, v in config_items(config)]
    for k, v in (extra or {}).items():
        if v is not None:
            lines.append(f"{k} = {_render(v)}")
    return "\n".join(lines) + "\n"


def write_config(path: str | os.PathLike, config: TrainConfig, extra: Mapping[str, object] | None = None,
                 header: str | None = None) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(format_config(config, extra, header), encoding="utf-8")
    return p


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()[:16]
