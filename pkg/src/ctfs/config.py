"""Experiment configuration: a flat ``key = value`` file with sections.

Example::

    [dataset]
    data_dir = data/
    ratio = 0.05

    [mvra]
    delta = 0.5   # consistency smoothing
    grid = 32     # grid cell edge m, pixels

Keys are unique across sections, so overrides may be written either as
``key=value`` or ``section.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .augment import AugmentConfig
from .losses import LossConfig
from .mvra import MVRAConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # [dataset]
    data_dir: str = "data"
    ratio: float = 0.05
    split_seed: int = 0
    # [model]
    widths: tuple = (8, 16, 32, 64)
    encoder_lr: float = 5e-4
    decoder_lr: float = 2e-4
    weight_decay: float = 0.01
    # [teachers]
    warmup: int = 10            # E, supervised-only epochs
    ema_decay: float = 0.999
    rotation: str = "ctfs"      # ctfs | general (single general teacher)
    # [mvra]
    grid: int = 32              # m
    views: int = 2              # K stability views per teacher
    delta: float = 0.5          # consistency smoothing
    use_mvra: bool = True       # False -> reliability fixed at 1
    # [loss]
    lambda_u: float = 1.0
    psi: float = 0.4            # reliability threshold
    soft_targets: bool = False
    # [augment]
    alpha_min: float = 0.3
    alpha_max: float = 0.7
    gamma_min: float = 0.2
    gamma_max: float = 0.5
    span_min_deg: float = 15.0
    span_max_deg: float = 60.0
    scale_min: float = 1.0
    scale_max: float = 1.5
    flip_prob: float = 0.5
    sonar_geometric: bool = True
    # [trainer]
    epochs: int = 50
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    seed: int = 0
    run_dir: str = "runs/ctfs"
    checkpoint_every: int = 1

    # ---------------------------------------------------------------- views

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            alpha_range=(self.alpha_min, self.alpha_max),
            span_deg_range=(self.span_min_deg, self.span_max_deg),
            gamma_range=(self.gamma_min, self.gamma_max),
            scale_range=(self.scale_min, self.scale_max),
            flip_prob=self.flip_prob,
            sonar_geometric=self.sonar_geometric,
        )

    def mvra_config(self) -> MVRAConfig:
        return MVRAConfig(grid=self.grid, views=self.views, delta=self.delta)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_u=self.lambda_u, psi=self.psi, soft_targets=self.soft_targets)

    def validate(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.rotation not in ("ctfs", "general"):
            raise ConfigError(f"rotation must be 'ctfs' or 'general', got {self.rotation!r}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        if not 0.0 <= self.delta <= 1.0 or not 0.0 <= self.psi <= 1.0:
            raise ConfigError("delta and psi must be in [0, 1]")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        for name in ("epochs", "batch_labeled", "batch_unlabeled", "grid", "views"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "dataset": ("data_dir", "ratio", "split_seed"),
    "model": ("widths", "encoder_lr", "decoder_lr", "weight_decay"),
    "teachers": ("warmup", "ema_decay", "rotation"),
    "mvra": ("grid", "views", "delta", "use_mvra"),
    "loss": ("lambda_u", "psi", "soft_targets"),
    "augment": ("alpha_min", "alpha_max", "gamma_min", "gamma_max", "span_min_deg",
                "span_max_deg", "scale_min", "scale_max", "flip_prob", "sonar_geometric"),
    "trainer": ("epochs", "batch_labeled", "batch_unlabeled", "seed", "run_dir", "checkpoint_every"),
}
_KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}
_TYPES = typing.get_type_hints(ExperimentConfig)


def _convert(key: str, raw: str):
    raw = raw.strip()
    kind = _TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _resolve_key(key: str) -> str:
    if "." in key:
        section, key = key.split(".", 1)
        if _KEY_SECTION.get(key) != section:
            raise ConfigError(f"unknown key {section}.{key}")
    if key not in _KEY_SECTION:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    changes = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        key = _resolve_key(k.strip())
        changes[key] = _convert(key, v)
    return cfg.replace(**changes)


_FLAT = "__flat__"  # keys given before any section header


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text if text.lstrip().startswith("[") else f"[{_FLAT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    values = {}
    for section in parser.sections():
        if section != _FLAT and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            key = _resolve_key(key if section == _FLAT else f"{section}.{key}")
            values[key] = _convert(key, raw)
    return ExperimentConfig(**values)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config(text)
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_format(getattr(cfg, k))}" for k in keys)
        lines.append("")
    return "\n".join(lines)


assert set(_KEY_SECTION) == {f.name for f in fields(ExperimentConfig)}
