"""Desk-scale stand-in data: noisy, cross-correlated sinusoid mixtures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import TimeSeries


@dataclass(frozen=True)
class Sinusoid:
    frequency: float  # cycles per time step
    amplitude: float
    phase: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Features are grouped; features of a group share base frequencies and
    have nearby phases, so within-group pairs are strongly correlated.

    Passing ``components`` (one list of sinusoids per feature) bypasses the
    random draw entirely.
    """

    n_features: int = 8
    n_steps: int = 2000
    noise_std: float = 0.1
    seed: int = 0
    n_groups: int = 2
    components_per_group: int = 2
    components: Optional[Sequence[Sequence[Sinusoid]]] = None
    offsets: Optional[Sequence[float]] = None

    def __post_init__(self) -> None:
        if self.n_features < 1 or self.n_steps < 1:
            raise ValueError("n_features and n_steps must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.n_groups < 1 or self.components_per_group < 1:
            raise ValueError("n_groups and components_per_group must be >= 1")
        if self.components is not None and len(self.components) != self.n_features:
            raise ValueError("components needs one entry per feature")
        if self.offsets is not None and len(self.offsets) != self.n_features:
            raise ValueError("offsets needs one entry per feature")

    def group_of(self, feature: int) -> int:
        return feature % self.n_groups


def draw_components(spec: SyntheticSpec, rng: np.random.Generator) -> list[list[Sinusoid]]:
    bases = [
        [(rng.uniform(1 / 200, 1 / 25), rng.uniform(0, 2 * np.pi)) for _ in range(spec.components_per_group)]
        for _ in range(spec.n_groups)
    ]
    out = []
    for d in range(spec.n_features):
        out.append([
            Sinusoid(freq, rng.uniform(0.8, 1.2), phase + rng.uniform(-0.2, 0.2))
            for freq, phase in bases[spec.group_of(d)]
        ])
    return out


def generate_synthetic(spec: SyntheticSpec) -> TimeSeries:
    rng = np.random.default_rng(spec.seed)
    components = spec.components if spec.components is not None else draw_components(spec, rng)
    offsets = np.zeros(spec.n_features) if spec.offsets is None else np.asarray(spec.offsets, dtype=float)
    t = np.arange(spec.n_steps)
    values = np.empty((spec.n_features, spec.n_steps))
    for d, parts in enumerate(components):
        values[d] = offsets[d] + sum(s.amplitude * np.sin(2 * np.pi * s.frequency * t + s.phase) for s in parts)
    if spec.noise_std > 0:
        values += rng.normal(0.0, spec.noise_std, size=values.shape)
    return TimeSeries.from_values(values, [f"sensor_{d}" for d in range(spec.n_features)])
