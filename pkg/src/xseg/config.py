"""Experiment configuration file: versioned JSON with defaults for every field."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import DiceConfig
from .trainer import AugmentConfig, OptimizerConfig, TrainConfig
from .unet import ModelConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    optimizer: OptimizerConfig = OptimizerConfig()
    train: TrainConfig = TrainConfig()


@dataclass(frozen=True)
class Stage0Config:
    checkpoint: str | None = None  # external weights in the XSEG checkpoint format
    emulate: bool = True  # train on the source domain when no checkpoint is given
    optimizer: OptimizerConfig = OptimizerConfig()
    train: TrainConfig = TrainConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    repetitions: int = 25
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    threshold: float = 0.5
    model: ModelConfig = ModelConfig()
    datasets: dict = field(default_factory=dict)
    stage0: Stage0Config = Stage0Config()
    stage1: StageConfig = StageConfig()
    stage2: StageConfig = StageConfig()
    base_dir: Path = field(default=Path("."), compare=False)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"fractions must be three positive numbers: {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1: {self.fractions}")
        unknown = set(self.datasets) - {"source", "general", "portable", "portable_transfer", "portable_heldout"}
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")

    def dataset_path(self, key: str) -> Path | None:
        value = self.datasets.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["fractions"] = list(self.fractions)
        for stage in ("stage0", "stage1", "stage2"):
            tr = d[stage]["train"]
            tr["augment"]["rotation_range"] = list(tr["augment"]["rotation_range"])
            tr["dice"]["lambda"] = tr["dice"].pop("lam")
        return d

    def canonical_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n").encode()

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def train_config_from(d: dict | None, where: str) -> TrainConfig:
    d = dict(d or {})
    aug = dict(d.pop("augment", None) or {})
    if "rotation_range" in aug:
        aug["rotation_range"] = tuple(float(x) for x in aug["rotation_range"])
    dice = dict(d.pop("dice", None) or {})
    if "lambda" in dice:
        dice["lam"] = dice.pop("lambda")
    return _build(
        TrainConfig,
        {**d, "augment": _build(AugmentConfig, aug, f"{where}.augment"), "dice": _build(DiceConfig, dice, f"{where}.dice")},
        where,
    )


def _stage(d: dict | None, where: str, cls=StageConfig):
    d = dict(d or {})
    opt = _build(OptimizerConfig, d.pop("optimizer", None), f"{where}.optimizer")
    tr = train_config_from(d.pop("train", None), f"{where}.train")
    return _build(cls, {**d, "optimizer": opt, "train": tr}, where)


def config_from_dict(d: dict, base_dir=Path(".")) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    d = dict(d)
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version!r} not supported (expected {SCHEMA_VERSION})")
    model = _build(ModelConfig, d.pop("model", None), "model")
    s0 = _stage(d.pop("stage0", None), "stage0", Stage0Config)
    s1 = _stage(d.pop("stage1", None), "stage1")
    s2 = _stage(d.pop("stage2", None), "stage2")
    if "fractions" in d:
        d["fractions"] = tuple(float(x) for x in d["fractions"])
    return _build(
        ExperimentConfig,
        {**d, "model": model, "stage0": s0, "stage1": s1, "stage2": s2, "base_dir": Path(base_dir)},
        "config",
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data, path.parent)
