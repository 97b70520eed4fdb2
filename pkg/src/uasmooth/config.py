"""Experiment configuration: one YAML document with nested sections.

Sections: architecture, loss, frontend, trainer, data. Missing keys fall back
to the defaults below; unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import re

import yaml

from .audio import FrontendConfig
from .errors import ConfigError
from .losses import LossMode
from .model import ArchitectureConfig
from .synthetic import SyntheticConfig


@dataclass
class LossConfig:
    mode: str = "ua-smooth"
    cold_factor: float = 1e-10
    logit_samples: int = 10
    fixed_alpha: float = 0.1
    empirical_bayes: bool = True
    prior_variances: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        LossMode.parse(self.mode)
        if self.cold_factor < 0:
            raise ConfigError(f"loss.cold_factor must be >= 0, got {self.cold_factor}")
        if self.logit_samples < 1:
            raise ConfigError(f"loss.logit_samples must be >= 1, got {self.logit_samples}")
        if not 0 <= self.fixed_alpha <= 1:
            raise ConfigError(f"loss.fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")

    @property
    def loss_mode(self) -> LossMode:
        return LossMode.parse(self.mode)


@dataclass
class TrainingConfig:
    batch_size: int = 8
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 15
    max_epochs: int = 200
    seed: int = 0
    trials: int = 1
    augment: bool = True
    eval_batch_size: int = 64

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("batch_size", "patience", "max_epochs", "trials", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"trainer.{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0 or not self.eps > 0:
            raise ConfigError("trainer.lr and trainer.eps must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"trainer.betas must be two values in [0, 1), got {self.betas}")


@dataclass
class DataConfig:
    corpus: str | None = None  # directory written by `synth`; None generates in memory
    synthetic: SyntheticConfig | None = None  # None: default generator sized to the architecture

    def __post_init__(self) -> None:
        if isinstance(self.synthetic, dict):
            self.synthetic = _build(SyntheticConfig, self.synthetic, "data.synthetic")


@dataclass
class ExperimentConfig:
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    trainer: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self) -> None:
        if self.data.synthetic is None:
            arch = self.architecture
            self.data.synthetic = SyntheticConfig(shape=arch.input_shape, tasks=arch.tasks)

    def to_dict(self) -> dict:
        d = {
            "architecture": self.architecture.to_dict(),
            "loss": asdict(self.loss),
            "frontend": asdict(self.frontend),
            "trainer": asdict(self.trainer),
            "data": asdict(self.data),
        }
        return _plain(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping of sections")
        sections = {f.name for f in fields(cls)}
        unknown = set(d) - sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            arch = d.get("architecture") or {}
            return cls(
                architecture=ArchitectureConfig.from_dict(arch) if arch else ArchitectureConfig(),
                loss=_build(LossConfig, d.get("loss"), "loss"),
                frontend=_build(FrontendConfig, d.get("frontend"), "frontend"),
                trainer=_build(TrainingConfig, d.get("trainer"), "trainer"),
                data=_build(DataConfig, d.get("data"), "data"),
            )
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from err

    def validate(self) -> "ExperimentConfig":
        self.architecture.validate()
        if self.data.synthetic.shape != self.architecture.input_shape and self.data.corpus is None:
            raise ConfigError(f"data.synthetic.shape {self.data.synthetic.shape} does not match "
                              f"architecture.input_shape {self.architecture.input_shape}")
        if self.data.synthetic.tasks != self.architecture.tasks and self.data.corpus is None:
            raise ConfigError("data.synthetic.tasks must equal architecture.tasks")
        return self


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, d, section: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from err


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (1e-5)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        d = yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from err
    return ExperimentConfig.from_dict(d).validate()


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def miniature_experiment(**trainer) -> ExperimentConfig:
    """Desk-scale setup used by the synthetic end-to-end checks."""
    arch = ArchitectureConfig.miniature()
    kw = dict(lr=3e-3, max_epochs=40, patience=10, augment=False)
    kw.update(trainer)
    front = FrontendConfig(frames=32, n_mels=16, time_mask_width=3, freq_mask_width=2)
    return ExperimentConfig(architecture=arch, frontend=front, trainer=TrainingConfig(**kw))
