"""Training configuration: one JSON document, hashed into every checkpoint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .multitask import ModelConfig
from .optim import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class Stage1Config:
    epochs: int = 200
    batch_size: int = 32
    early_stop_accuracy: float = 0.99
    patience: int = 5
    # False skips Stage I entirely (ablation variants b and c)
    enabled: bool = True


@dataclass
class Stage2Config:
    epochs: int = 300
    batch_size: int = 32
    aux_ext_weight: float = 0.0
    patience: int = 20


@dataclass
class DomainEntry:
    name: str
    dim: int
    path: Optional[str] = None


@dataclass
class SynthConfig:
    k: int = 3
    dims: list[int] = field(default_factory=lambda: [48, 64, 80])
    q: int = 14
    m: int = 600
    dependency: float = 0.8
    signature: float = 1.0
    noise: float = 0.3
    linear: bool = False


@dataclass
class DataConfig:
    """Either CSV files (``domains`` with paths + ``labels``) or a ``synthetic`` spec."""

    domains: list[DomainEntry] = field(default_factory=list)
    labels: Optional[str] = None
    # label columns expected in ``labels``; None means the 14 ATC classes
    label_names: Optional[list[str]] = None
    replicate_on: Optional[int] = None
    impute: bool = False
    synthetic: Optional[SynthConfig] = field(default_factory=SynthConfig)
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    group_by_compound: bool = True
    standardize: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self.stage1, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"stage1.{name} out of range")
            if getattr(self.stage2, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"stage2.{name} out of range")
        if self.stage2.aux_ext_weight < 0:
            raise ConfigError("stage2.aux_ext_weight must be >= 0")
        fr = self.data.split
        if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"data.split must be three positive fractions summing to 1, got {fr}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        try:
            return _build(cls, raw, "config")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build(cls, raw, where: str):
    """Recursively build nested dataclasses, rejecting unknown keys."""
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    hints = _nested_types(cls)
    for key, value in raw.items():
        sub = hints.get(key)
        if sub is not None and value is not None:
            value = _build(sub, value, f"{where}.{key}")
        elif key == "domains":
            value = [_build(DomainEntry, v, f"{where}.domains[{i}]") for i, v in enumerate(value)]
        kwargs[key] = value
    return cls(**kwargs)


def _nested_types(cls) -> dict:
    from .embedder import EmbedderConfig

    table = {
        TrainConfig: {
            "stage1": Stage1Config,
            "stage2": Stage2Config,
            "optimizer": OptimizerConfig,
            "model": ModelConfig,
            "data": DataConfig,
        },
        ModelConfig: {"embedder": EmbedderConfig},
        DataConfig: {"synthetic": SynthConfig},
    }
    return table.get(cls, {})
