"""Flat key=value run configuration shared by the CLI commands.

One namespace covers every model and training field; each key belongs to
exactly one dataclass, values are typed from the field defaults, and any
parse problem reports its source line.  Command-line flags carry the same
names and take precedence over the file.
"""

from __future__ import annotations

import dataclasses

from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "CONFIG_TYPES", "parse_config_file",
           "build_configs", "config_snapshot", "configs_from_snapshot"]


class ConfigError(ValueError):
    """Bad configuration input (file syntax, unknown key, bad value)."""


def _types_of(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is dataclasses.MISSING:
            raise AssertionError(f"{cls.__name__}.{f.name} needs a default")
        out[f.name] = type(f.default)
    return out


_MODEL_TYPES = _types_of(ModelConfig)
_TRAIN_TYPES = _types_of(TrainConfig)
_overlap = set(_MODEL_TYPES) & set(_TRAIN_TYPES)
if _overlap:
    raise AssertionError(f"config key collision: {sorted(_overlap)}")

CONFIG_TYPES: dict[str, type] = {**_MODEL_TYPES, **_TRAIN_TYPES}


def _convert(key: str, text: str, where: str):
    typ = CONFIG_TYPES[key]
    try:
        if typ is tuple:
            return tuple(int(p.strip()) for p in text.split(",") if p.strip())
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"{where}: bad value for {key!r}: {text!r} "
                          f"(expected {typ.__name__})") from None
    raise ConfigError(f"{where}: unsupported type for {key!r}")


def parse_config_file(path: str) -> dict:
    """``key = value`` lines into typed values; ``#`` starts a comment.

    Unknown keys, duplicates, and malformed lines raise ConfigError naming
    ``path:line``.
    """
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = _convert(key, text, f"{path}:{lineno}")
    return values


def build_configs(path: str | None = None,
                  overrides: dict[str, str] | None = None
                  ) -> tuple[ModelConfig, TrainConfig]:
    """Configs from an optional file plus flag overrides (flag wins)."""
    values = parse_config_file(path) if path else {}
    for key, text in (overrides or {}).items():
        if key not in CONFIG_TYPES:
            raise ConfigError(f"--{key}: unknown key")
        values[key] = (text if not isinstance(text, str)
                       else _convert(key, text, f"--{key}"))
    mcfg = ModelConfig(**{k: v for k, v in values.items()
                          if k in _MODEL_TYPES})
    tcfg = TrainConfig(**{k: v for k, v in values.items()
                          if k in _TRAIN_TYPES})
    try:
        mcfg.validate()
        tcfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return mcfg, tcfg


def config_snapshot(mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    return {"model": dataclasses.asdict(mcfg),
            "train": dataclasses.asdict(tcfg)}


def configs_from_snapshot(snap: dict) -> tuple[ModelConfig, TrainConfig]:
    """Rebuild configs from a snapshot dict (JSON turns tuples into lists)."""

    def fix(d, types):
        return {k: (tuple(v) if types.get(k) is tuple else v)
                for k, v in d.items() if k in types}

    return (ModelConfig(**fix(snap["model"], _MODEL_TYPES)),
            TrainConfig(**fix(snap["train"], _TRAIN_TYPES)))
