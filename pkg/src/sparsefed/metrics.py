"""Anomaly thresholds, point-wise scoring, detection metrics and imputation RMSE.

Scores are per (feature, time) cell: the squared reconstruction error of a
cell averaged over every stride-1 window that covers it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autoencoder import ParameterVector, reconstruct_windows
from .data import ClientDataset, overlap_average


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int


def calibrate_threshold(train_errors: Sequence[float], c: float) -> tuple[ErrorStats, float]:
    """``E = mean + c * std`` with the unbiased sample standard deviation."""
    errors = np.asarray(train_errors, dtype=float).ravel()
    if errors.size < 2:
        raise MetricsError("need at least two training errors to calibrate a threshold")
    stats = ErrorStats(mean=float(errors.mean()), std=float(errors.std(ddof=1)), count=int(errors.size))
    return stats, stats.mean + c * stats.std


def _check_model(model: ParameterVector, client: ClientDataset) -> None:
    if model.input_dim != client.input_dim:
        raise MetricsError(f"model input size {model.input_dim} does not match client window length {client.input_dim}")


def reconstruct_series(model: ParameterVector, client: ClientDataset) -> np.ndarray:
    """Model output for the client's local range (``M_i x T_local``), averaged over windows."""
    _check_model(model, client)
    out = reconstruct_windows(model, client.windows)
    return overlap_average(out, client.n_features, client.n_steps)


def cell_errors(model: ParameterVector, client: ClientDataset) -> np.ndarray:
    """Squared reconstruction error per local cell, averaged over covering windows."""
    _check_model(model, client)
    windows = client.windows
    sq = (reconstruct_windows(model, windows) - windows) ** 2
    return overlap_average(sq, client.n_features, client.n_steps)


def score_points(model: ParameterVector, client: ClientDataset, E: float) -> np.ndarray:
    """Boolean ``M_i x T_local`` labels, true where the cell error exceeds ``E``."""
    return cell_errors(model, client) > E


def detection_metrics(predicted, truth) -> DetectionMetrics:
    """Confusion-matrix metrics; precision and recall are 1.0 when their denominator is 0."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise MetricsError(f"shape mismatch: {predicted.shape} vs {truth.shape}")
    tp = int(np.sum(predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))
    tn = int(np.sum(~predicted & ~truth))
    total = tp + fp + fn + tn
    return DetectionMetrics(
        precision=tp / (tp + fp) if tp + fp else 1.0,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        accuracy=(tp + tn) / total if total else 1.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def imputation_rmse(truth: np.ndarray, reconstructed: np.ndarray, missing_mask: np.ndarray) -> float:
    """RMSE over missing cells. Pass both arrays in physical units."""
    truth = np.asarray(truth, dtype=float)
    reconstructed = np.asarray(reconstructed, dtype=float)
    missing_mask = np.asarray(missing_mask, dtype=bool)
    if not truth.shape == reconstructed.shape == missing_mask.shape:
        raise MetricsError("truth, reconstruction and mask must share a shape")
    if not missing_mask.any():
        raise MetricsError("no missing cells to evaluate")
    diff = (truth - reconstructed)[missing_mask]
    return float(np.sqrt(np.mean(diff ** 2)))


def tune_c(
    val_errors: Sequence[np.ndarray],
    val_truth: Sequence[np.ndarray],
    stats: Sequence[ErrorStats],
    c_grid: Sequence[float],
) -> tuple[float, float]:
    """Pick the ``c`` from ``c_grid`` maximizing pooled validation accuracy.

    One entry per threshold scope (client or global) in each sequence. Ties go
    to the smaller ``c``. Returns ``(c, accuracy)``.
    """
    if not c_grid:
        raise MetricsError("c grid is empty")
    best = None
    for c in sorted(c_grid):
        pred = np.concatenate([(e > s.mean + c * s.std).ravel() for e, s in zip(val_errors, stats)])
        truth = np.concatenate([t.ravel() for t in val_truth])
        acc = detection_metrics(pred, truth).accuracy
        if best is None or acc > best[1]:
            best = (float(c), acc)
    return best
