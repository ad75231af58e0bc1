"""Server-side fusion rules.

``admm_sparse_fuse`` minimizes

    1/2 * sum_i ||theta - theta_i||^2 + lam * ||theta||_1

by scaled-dual ADMM on the split ``z = theta``. The objective is separable, so
its exact minimizer is ``soft(mean_i theta_i, lam / N)``;
``closed_form_sparse_fuse`` computes that directly and serves as the oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autoencoder import ParameterVector, SparsityMask

logger = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.0
    b: float = 1.0
    max_iters: int = 500
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise FusionError("lambda must be nonnegative")
        if self.b <= 0 or self.tol <= 0 or self.max_iters < 1:
            raise FusionError("need b > 0, tol > 0 and max_iters >= 1")


@dataclass
class AdmmState:
    theta: np.ndarray
    z: np.ndarray
    u: np.ndarray
    k: int = 0


@dataclass
class AdmmResult:
    model: ParameterVector
    iterations: int
    converged: bool
    residuals: list[tuple[float, float]] = field(default_factory=list)
    state: AdmmState | None = None


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def _stack(models: Sequence[ParameterVector]) -> np.ndarray:
    if not models:
        raise FusionError("no models to fuse")
    meta = models[0].shape_meta
    for m in models[1:]:
        if m.shape_meta != meta:
            raise FusionError("models have mismatched shapes")
    return np.stack([m.flat for m in models])


def average_fuse(models: Sequence[ParameterVector]) -> ParameterVector:
    stacked = _stack(models)
    return models[0].with_flat(stacked.mean(axis=0))


def closed_form_sparse_fuse(models: Sequence[ParameterVector], lam: float) -> ParameterVector:
    if lam < 0:
        raise FusionError("lambda must be nonnegative")
    stacked = _stack(models)
    # + 0.0 turns the -0.0 that sign() * 0 can produce into +0.0
    return models[0].with_flat(soft_threshold(stacked.mean(axis=0), lam / len(models)) + 0.0)


def fusion_objective(theta: np.ndarray, models: Sequence[ParameterVector], lam: float) -> float:
    stacked = _stack(models)
    return 0.5 * float(((stacked - theta) ** 2).sum()) + lam * float(np.abs(theta).sum())


def admm_sparse_fuse(models: Sequence[ParameterVector], cfg: FusionConfig) -> AdmmResult:
    """Compress-fuse local models; the returned model is the exactly sparse ``z`` iterate.

    Stops once ``max(||z - theta||_inf, b * ||z_k - z_{k-1}||_inf) <= tol``.
    Non-convergence is logged and flagged on the result, not raised.
    """
    stacked = _stack(models)
    n = len(models)
    total = stacked.sum(axis=0)
    tau = cfg.lam / cfg.b
    z = np.zeros_like(total)
    u = np.zeros_like(total)
    theta = z
    residuals = []
    converged = False
    k = 0
    while k < cfg.max_iters:
        k += 1
        theta = (total + cfg.b * (z + u)) / (n + cfg.b)
        z_new = soft_threshold(theta - u, tau) + 0.0
        u = u + z_new - theta
        primal = float(np.max(np.abs(z_new - theta), initial=0.0))
        dual = cfg.b * float(np.max(np.abs(z_new - z), initial=0.0))
        z = z_new
        residuals.append((primal, dual))
        if max(primal, dual) <= cfg.tol:
            converged = True
            break
    if not converged:
        logger.warning("ADMM fusion stopped after %d iterations (primal %.3g, dual %.3g)", k, *residuals[-1])
    return AdmmResult(
        model=models[0].with_flat(z),
        iterations=k,
        converged=converged,
        residuals=residuals,
        state=AdmmState(theta=theta, z=z, u=u, k=k),
    )


def extract_mask(model: ParameterVector, zero_tol: float = 0.0) -> SparsityMask:
    if zero_tol < 0:
        raise FusionError("zero_tol must be nonnegative")
    return SparsityMask(np.abs(model.flat) > zero_tol)


def masked_average_fuse(models: Sequence[ParameterVector], mask: SparsityMask) -> ParameterVector:
    stacked = _stack(models)
    if len(mask) != stacked.shape[1]:
        raise FusionError("mask length does not match the models")
    return models[0].with_flat(np.where(mask.bits, stacked.mean(axis=0), 0.0))


def compression_rate(model: ParameterVector, zero_tol: float = 0.0) -> float:
    flat = model.flat
    return float(np.count_nonzero(np.abs(flat) <= zero_tol)) / flat.size
