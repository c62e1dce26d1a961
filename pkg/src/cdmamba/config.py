"""``key = value`` run configuration files.

Keys are the fields of :class:`NetworkConfig` and :class:`TrainConfig` plus
the synthetic-data keys ``data_seed``, ``data_count`` and ``data_size``.
Lists are comma separated (``stage_widths = 8, 16, 24, 32, 48, 64``); ``#``
starts a comment.  Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .network import NetworkConfig
from .trainer import TrainConfig

_SECTION = "run"


@dataclass(frozen=True)
class DataConfig:
    data_seed: int = 42
    data_count: int = 200
    data_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return type(default)(raw.strip())


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    base = base or RunConfig()
    groups = {"network": base.network, "train": base.train, "data": base.data}
    owner = {f.name: g for g, obj in groups.items() for f in dataclasses.fields(obj)}
    updates: dict[str, dict] = {g: {} for g in groups}
    for key, raw in parser[_SECTION].items():
        if key not in owner:
            raise ConfigError(f"unknown config key {key!r}")
        g = owner[key]
        try:
            updates[g][key] = _coerce(raw, getattr(groups[g], key))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        return RunConfig(**{g: dataclasses.replace(groups[g], **updates[g]) for g in groups})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)
