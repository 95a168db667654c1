"""Flat ``key = value`` run configuration.

Every training hyper-parameter has one key.  Defaults match the reference
schedule; values from the command line override values from the file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError, DataError
from .training import PHASE_DEFAULTS, TrainConfig

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
BACKBONES = ("transformer", "toy")


@dataclass(frozen=True)
class RunConfig:
    corpus_root: str | None = None
    backbone: str = "transformer"
    backbone_weights: str | None = None
    train_triplets: str | None = None
    val_pairs: str | None = None
    seed: int = 0
    log_level: str = "INFO"
    batch_size: int = 128
    weight_decay: float = 1e-3
    cosine_period_iters: int = 10000
    checkpoint_every: int = 1000
    lr_phase1: float = PHASE_DEFAULTS[1]["learning_rate"]
    lr_phase2: float = PHASE_DEFAULTS[2]["learning_rate"]
    lr_phase3: float = PHASE_DEFAULTS[3]["learning_rate"]
    max_iters_phase1: int = PHASE_DEFAULTS[1]["max_iters"]
    max_iters_phase2: int = PHASE_DEFAULTS[2]["max_iters"]
    max_iters_phase3: int = PHASE_DEFAULTS[3]["max_iters"]

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got {self.log_level!r}")

    def override(self, **values) -> "RunConfig":
        """Return a copy with every non-None value applied."""
        known = {f.name for f in fields(self)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    def backbone_config(self) -> BackboneConfig:
        if self.backbone == "toy":
            return BackboneConfig.toy(seed=self.seed)
        return BackboneConfig.vit_b32(seed=self.seed)

    def train_config(self, phase: int) -> TrainConfig:
        return TrainConfig(
            phase=phase,
            learning_rate=getattr(self, f"lr_phase{phase}"),
            weight_decay=self.weight_decay,
            cosine_period_iters=self.cosine_period_iters,
            batch_size=self.batch_size,
            max_iters=getattr(self, f"max_iters_phase{phase}"),
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
        )

    @property
    def logging_level(self) -> int:
        return getattr(logging, self.log_level.upper())

    def check_paths(self, *keys: str) -> None:
        """Fail fast if any of the named path keys is set but missing on disk."""
        for key in keys:
            value = getattr(self, key)
            if value is None:
                continue
            p = Path(value)
            if key == "corpus_root" and not p.is_dir():
                raise DataError(f"{key}: directory not found: {p}")
            if key != "corpus_root" and not p.is_file():
                raise DataError(f"{key}: file not found: {p}")


def _convert(key: str, typ, text: str, where: str):
    try:
        if typ is int or typ == "int":
            return int(text)
        if typ is float or typ == "float":
            return float(text)
    except ValueError:
        name = typ if isinstance(typ, str) else typ.__name__
        raise ConfigError(f"{where}: {key} expects {name}, got {text!r}") from None
    if text.lower() in ("", "none"):
        return None
    return text


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key not in types:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _convert(key, types[key], value, where)
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: config is not valid UTF-8") from None
    return parse_config(text, str(path))
