"""Experiment configuration (YAML or JSON), validated with pydantic.

Unknown keys are rejected and every violation is reported with its field
path before any computation starts.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .autoencoder import LayerSpec, ProximalConfig
from .data import DEFAULT_SPLIT_FRACTIONS
from .fusion import FusionConfig
from .orchestrator import RoundSchedule
from .synthetic import SyntheticSpec

DEFAULT_C_GRID = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0]


class ConfigError(ValueError):
    """Carries the full list of violations as ``"field.path: message"`` strings."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class CsvSource(_Strict):
    path: str
    delimiter: str = ","
    header: bool = False
    features: Optional[list[int]] = None


class SyntheticSource(_Strict):
    n_features: int = Field(8, ge=1)
    n_steps: int = Field(2000, ge=1)
    noise_std: float = Field(0.1, ge=0)
    seed: int = 0
    n_groups: int = Field(2, ge=1)
    components_per_group: int = Field(2, ge=1)

    def to_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.model_dump())


class DataConfig(_Strict):
    csv: Optional[CsvSource] = None
    synthetic: Optional[SyntheticSource] = None
    train_fraction: float = Field(DEFAULT_SPLIT_FRACTIONS[0], gt=0, le=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'csv' or 'synthetic' must be given")
        return self


class SchemeConfig(_Strict):
    name: Literal["centralized", "multivariate", "univariate"] = "univariate"
    n_clients: int = Field(5, ge=1)


class ScheduleConfig(_Strict):
    compression_rounds: int = Field(30, ge=1)
    finetune_rounds: int = Field(10, ge=0)
    compression_rate_target: float = Field(0.0, ge=0, le=1)

    def to_schedule(self) -> RoundSchedule:
        return RoundSchedule(**self.model_dump())


class FusionSettings(_Strict):
    lam: float = Field(0.0, ge=0, alias="lambda")
    b: float = Field(1.0, gt=0)
    tol: float = Field(1e-8, gt=0)
    max_iters: int = Field(500, ge=1)
    zero_tol: float = Field(0.0, ge=0)

    def to_fusion(self) -> FusionConfig:
        return FusionConfig(lam=self.lam, b=self.b, max_iters=self.max_iters, tol=self.tol)


class ClientSettings(_Strict):
    mu: float = Field(0.01, ge=0)
    epochs: int = Field(30, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    prox_factor: float = Field(2.0, ge=0)

    def to_proximal(self) -> ProximalConfig:
        return ProximalConfig(**self.model_dump())


class CorruptionConfig(_Strict):
    task: Literal["anomaly", "imputation"] = "anomaly"
    rate: float = Field(0.1, ge=0, le=1)
    factor: float = Field(3.0, gt=1)
    seed: Optional[int] = None
    c: float = 3.0
    c_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_C_GRID))
    threshold_scope: Literal["per_client", "global"] = "per_client"


class ExperimentConfig(_Strict):
    seed: int = 0
    w: int = Field(50, ge=1)
    layers: list[int] = Field(default_factory=lambda: [64, 32, 32, 64])
    data: DataConfig
    scheme: SchemeConfig = Field(default_factory=SchemeConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    fusion: FusionSettings = Field(default_factory=FusionSettings)
    client: ClientSettings = Field(default_factory=ClientSettings)
    corruption: CorruptionConfig = Field(default_factory=CorruptionConfig)
    output_dir: Optional[str] = None

    @field_validator("layers")
    @classmethod
    def _positive_widths(cls, v: list[int]) -> list[int]:
        bad = [s for s in v if s < 1]
        if bad:
            raise ValueError(f"layer widths must be >= 1, got {bad}")
        return v

    @model_validator(mode="after")
    def _window_fits(self):
        syn = self.data.synthetic
        if syn is not None:
            steps = syn.n_steps
            if self.scheme.name == "multivariate":
                steps //= self.scheme.n_clients
            if int(self.data.train_fraction * steps) < self.w:
                raise ValueError(f"w={self.w} exceeds the {int(self.data.train_fraction * steps)} "
                                 f"training steps available per client")
        return self

    @property
    def layer_spec(self) -> LayerSpec:
        return LayerSpec(tuple(self.layers))

    @property
    def corruption_seed(self) -> int:
        return self.seed if self.corruption.seed is None else self.corruption.seed

    def echo(self) -> dict:
        """Every effective parameter, defaults included; the output location is left out."""
        return self.model_dump(mode="json", by_alias=True, exclude={"output_dir"})


def _violations(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_violations(exc)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: configuration must be a mapping"])
    return validate_config(raw)
