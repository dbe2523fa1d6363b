"""Toolkit configuration: a sectioned INI file, with command-line flags taking precedence."""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any

from crashkit.distill import MixConfig, TrainConfig
from crashkit.filtering import FilterConfig
from crashkit.simulator import SimConfig
from crashkit.synth import SynthesisConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VocabSettings:
    k: int = 256
    n: int = 10_000
    seed: int = 0
    max_iters: int = 100


@dataclass(frozen=True)
class FilterSettings:
    d_thres: float = 3.0  # [m]
    theta_thres_deg: float = 10.0
    check_ego_lanes: bool = False


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 2e-4
    steps: int = 2000
    batch: int = 32
    ratio: str = "10:1"
    w_r: float = 1.0
    w_c: float = 1.0
    hidden: str = "64,64"
    optimizer: str = "adam"
    seed: int = 0


@dataclass(frozen=True)
class PathSettings:
    catalog: str = ""


@dataclass(frozen=True)
class ToolkitConfig:
    synthesis: SynthesisConfig = field(default_factory=lambda: SynthesisConfig(position_jitter=2.0, speed_jitter=0.5))
    filtering: FilterSettings = field(default_factory=FilterSettings)
    simulator: SimConfig = field(default_factory=SimConfig)
    vocabulary: VocabSettings = field(default_factory=VocabSettings)
    training: TrainSettings = field(default_factory=TrainSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def filter_config(self, vocab=None) -> FilterConfig:
        f = self.filtering
        return FilterConfig(vocab, f.d_thres, math.radians(f.theta_thres_deg), self.simulator, f.check_ego_lanes)

    def train_config(self) -> TrainConfig:
        t = self.training
        hidden = tuple(int(h) for h in t.hidden.split(",") if h.strip())
        return TrainConfig(steps=t.steps, lr=t.lr, batch_size=t.batch, hidden=hidden, optimizer=t.optimizer, seed=t.seed)

    def mix_config(self) -> MixConfig:
        t = self.training
        return MixConfig.from_ratio(t.ratio, t.w_r, t.w_c)


SECTIONS = ("synthesis", "filtering", "simulator", "vocabulary", "training", "paths")


def _coerce(section: str, key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _apply(obj: Any, section: str, values: dict[str, str]) -> Any:
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _coerce(section, key, raw, known[key])
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str, base: ToolkitConfig | None = None) -> ToolkitConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base or ToolkitConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cfg = replace(cfg, **{section: _apply(getattr(cfg, section), section, dict(parser[section]))})
    return cfg


def load_config(path: str | os.PathLike | None) -> ToolkitConfig:
    if path is None:
        return ToolkitConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def override(cfg: ToolkitConfig, section: str, **values: Any) -> ToolkitConfig:
    """Replace fields that were given on the command line (``None`` means not given)."""
    given = {k: v for k, v in values.items() if v is not None}
    if not given:
        return cfg
    return replace(cfg, **{section: replace(getattr(cfg, section), **given)})


def dump_config(cfg: ToolkitConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            value = getattr(obj, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    return "\n".join(lines)
