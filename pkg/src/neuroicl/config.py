"""TOML experiment configuration with strict schema checking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .channel import ChannelConfig, ConfigurationError
from .energy import EnergyConstants
from .trainer import TrainConfig
from .transformer import ModelConfig

__all__ = ["ExperimentConfig", "DataConfig", "SweepConfig", "EnergyConfig", "load_config", "ConfigurationError"]

REFERENCE_SIZES = ((2, 64), (4, 128), (4, 256), (8, 512))


@dataclass
class DataConfig:
    n_train_tasks: int = 4096
    eval_tasks: int = 500
    eval_queries: int = 16
    eval_snr_db: float = 10.0
    eval_snrs: list[float] = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])

    def __post_init__(self):
        if self.n_train_tasks < 1 or self.eval_tasks < 1 or self.eval_queries < 1:
            raise ConfigurationError("data sizes must be >= 1")


@dataclass
class SweepConfig:
    max_exponent: int = 12
    variants: list[str] = field(default_factory=lambda: ["snn", "ann"])

    def __post_init__(self):
        if self.max_exponent < 0:
            raise ConfigurationError("sweep.max_exponent must be >= 0")
        bad = set(self.variants) - {"snn", "ann"}
        if bad:
            raise ConfigurationError(f"unknown sweep variants {sorted(bad)}")

    @property
    def grid(self) -> list[int]:
        return [2 ** k for k in range(self.max_exponent + 1)]


@dataclass
class EnergyConfig:
    sizes: list[list[int]] = field(default_factory=lambda: [list(s) for s in REFERENCE_SIZES])
    n_contexts: int = 64
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.sizes:
            if len(s) != 2 or min(s) < 1:
                raise ConfigurationError(f"energy size {s} must be [n_layers, d_e]")
        self.energy_constants  # validates

    @property
    def energy_constants(self) -> EnergyConstants:
        try:
            return EnergyConstants.from_mapping(self.constants)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc


def _build(cls, section: str, d) -> object:
    if not isinstance(d, dict):
        raise ConfigurationError(f"[{section}] must be a table")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid [{section}]: {exc}") from exc


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    REQUIRED = ("seed", "model")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {"channel": ChannelConfig, "model": ModelConfig, "train": TrainConfig, "data": DataConfig,
                    "sweep": SweepConfig, "energy": EnergyConfig}
        unknown = set(d) - set(sections) - {"seed", "output_dir"}
        if unknown:
            raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
        missing = [k for k in cls.REQUIRED if k not in d]
        if "model" in d and "variant" not in d["model"]:
            missing.append("model.variant")
        if missing:
            raise ConfigurationError(f"missing required config keys: {missing}")
        kwargs = {}
        for name, sub in sections.items():
            raw = dict(d.get(name, {}))
            if name == "channel" and "snr_db_range" in raw:
                raw["snr_db_range"] = tuple(raw["snr_db_range"])
            kwargs[name] = _build(sub, name, raw)
        if not isinstance(d["seed"], int):
            raise ConfigurationError("seed must be an integer")
        cfg = cls(seed=d["seed"], output_dir=str(d.get("output_dir", "runs")), **kwargs)
        if cfg.model.n_classes != cfg.channel.n_classes:
            raise ConfigurationError(f"model.n_classes={cfg.model.n_classes} but the channel has "
                                     f"{cfg.channel.n_classes} symbol-vector classes")
        if cfg.model.m_max < 2 * cfg.channel.n_pilots + 1:
            raise ConfigurationError("model.m_max is shorter than the context sequence")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel"]["snr_db_range"] = list(d["channel"]["snr_db_range"])
        return d

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
