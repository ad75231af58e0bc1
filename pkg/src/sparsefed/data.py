"""Time-series loading, normalization, corruption, partitioning and windowing.

Values are held as ``D x T`` matrices (features by time steps). Corruption
helpers never destroy ground truth: missing cells keep their value and are
only flagged in ``obs_mask``; anomaly injection keeps the clean series in
``truth``.
"""

from __future__ import annotations

import contextvars
import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

# Name of the party currently executing; ClientDataset logs who reads its windows.
current_actor: contextvars.ContextVar[str] = contextvars.ContextVar("current_actor", default="server")


class DataError(ValueError):
    """Raised for malformed input data or invalid preprocessing arguments."""


@dataclass
class TimeSeries:
    values: np.ndarray
    feature_names: list[str]
    obs_mask: np.ndarray
    anomaly_labels: np.ndarray
    truth: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-D (features x steps), got shape {self.values.shape}")
        self.obs_mask = np.asarray(self.obs_mask, dtype=bool)
        self.anomaly_labels = np.asarray(self.anomaly_labels, dtype=bool)
        for name in ("obs_mask", "anomaly_labels"):
            if getattr(self, name).shape != self.values.shape:
                raise DataError(f"{name} shape {getattr(self, name).shape} != values shape {self.values.shape}")
        if len(self.feature_names) != self.values.shape[0]:
            raise DataError("feature_names length must equal the number of features")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=float)
            if self.truth.shape != self.values.shape:
                raise DataError("truth shape must equal values shape")

    @classmethod
    def from_values(cls, values, feature_names: Optional[Sequence[str]] = None) -> "TimeSeries":
        values = np.asarray(values, dtype=float)
        if feature_names is None:
            feature_names = [f"f{i}" for i in range(values.shape[0])]
        return cls(
            values=values,
            feature_names=list(feature_names),
            obs_mask=np.ones(values.shape, dtype=bool),
            anomaly_labels=np.zeros(values.shape, dtype=bool),
        )

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def ground_truth(self) -> np.ndarray:
        """Clean values (before anomaly injection); missing cells included."""
        return self.values if self.truth is None else self.truth

    def select_features(self, indices: Sequence[int]) -> "TimeSeries":
        idx = list(indices)
        return TimeSeries(
            values=self.values[idx],
            feature_names=[self.feature_names[i] for i in idx],
            obs_mask=self.obs_mask[idx],
            anomaly_labels=self.anomaly_labels[idx],
            truth=None if self.truth is None else self.truth[idx],
        )


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.std <= 0):
            raise DataError("standard deviations must be strictly positive")

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]


def load_csv(path, delimiter: str = ",", header: bool = False) -> TimeSeries:
    """Read a CSV whose rows are time steps and columns are features."""
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    with handle:
        reader = csv.reader(handle, delimiter=delimiter)
        names: Optional[list[str]] = None
        rows: list[list[float]] = []
        width = None
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if header and names is None:
                names = [c.strip() for c in row]
                width = len(names)
                continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
            parsed = []
            for col, cell in enumerate(row, start=1):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: cannot parse {cell!r} as a number") from None
                if not math.isfinite(value):
                    raise DataError(f"{path}: row {lineno}, column {col}: non-finite value {cell!r}")
                parsed.append(value)
            rows.append(parsed)

    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=float).T
    return TimeSeries.from_values(values, names)


def write_csv(ts: TimeSeries, handle, delimiter: str = ",", header: bool = True) -> None:
    """One row per time step; floats written with repr so they round-trip exactly."""
    writer = csv.writer(handle, delimiter=delimiter, lineterminator="\n")
    if header:
        writer.writerow(ts.feature_names)
    for row in ts.values.T:
        writer.writerow([repr(float(v)) for v in row])


def save_csv(ts: TimeSeries, path, delimiter: str = ",", header: bool = True) -> None:
    with Path(path).open("w", newline="") as handle:
        write_csv(ts, handle, delimiter, header)


def standardize(ts: TimeSeries, train_fraction: float = DEFAULT_SPLIT_FRACTIONS[0]) -> tuple[TimeSeries, NormalizationStats]:
    """Z-score every feature with mean/std of the observed training-prefix cells."""
    if not 0.0 < train_fraction <= 1.0:
        raise DataError(f"train_fraction must be in (0, 1], got {train_fraction}")
    n_train = max(1, int(math.floor(round(train_fraction * ts.n_steps, 9))))
    prefix = ts.values[:, :n_train]
    observed = ts.obs_mask[:, :n_train]

    mean = np.empty(ts.n_features)
    std = np.empty(ts.n_features)
    for d in range(ts.n_features):
        cells = prefix[d, observed[d]]
        if cells.size == 0:
            raise DataError(f"feature {ts.feature_names[d]!r} has no observed training values")
        mean[d] = cells.mean()
        std[d] = cells.std()
        if not std[d] > 0:
            raise DataError(f"feature {ts.feature_names[d]!r} has zero variance on the training prefix")

    stats = NormalizationStats(mean=mean, std=std)
    scaled = replace(
        ts,
        values=stats.transform(ts.values),
        truth=None if ts.truth is None else stats.transform(ts.truth),
    )
    return scaled, stats


def make_windows(local_series: np.ndarray, obs_mask: Optional[np.ndarray], w: int) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 windows of an ``M x T`` series.

    Row ``q`` of each returned array is the column-stacked vectorization of
    ``local_series[:, q:q + w]``, i.e. ``[y_q, y_{q+1}, ..., y_{q+w-1}]``.
    """
    local_series = np.atleast_2d(np.asarray(local_series, dtype=float))
    if obs_mask is None:
        obs_mask = np.ones(local_series.shape, dtype=bool)
    obs_mask = np.atleast_2d(np.asarray(obs_mask, dtype=bool))
    if w < 1:
        raise DataError(f"window length must be positive, got {w}")
    m, t = local_series.shape
    if t < w:
        raise DataError(f"series of length {t} is shorter than window length {w}")

    def vectorize(a: np.ndarray) -> np.ndarray:
        # (M, Q, w) -> (Q, w, M) -> (Q, w*M)
        view = sliding_window_view(a, w, axis=1)
        return np.ascontiguousarray(view.transpose(1, 2, 0).reshape(t - w + 1, w * m))

    return vectorize(local_series), vectorize(obs_mask)


def overlap_average(window_values: np.ndarray, n_features: int, n_steps: int) -> np.ndarray:
    """Inverse of :func:`make_windows`: average every cell over its covering windows."""
    window_values = np.asarray(window_values, dtype=float)
    q, length = window_values.shape
    w = length // n_features
    if q != n_steps - w + 1 or w * n_features != length:
        raise DataError("window array does not match the requested series shape")
    per_window = window_values.reshape(q, w, n_features)
    total = np.zeros((n_steps, n_features))
    counts = np.zeros(n_steps)
    for offset in range(w):
        total[offset:offset + q] += per_window[:, offset, :]
        counts[offset:offset + q] += 1
    return (total / counts[:, None]).T


def inject_mcar(ts: TimeSeries, p: float, seed: int) -> TimeSeries:
    """Flag each cell missing independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise DataError(f"missing rate must be in [0, 1], got {p}")
    if not ts.obs_mask.all():
        raise DataError("series already has missing values")
    rng = np.random.default_rng(seed)
    missing = rng.random(ts.values.shape) < p
    return replace(ts, obs_mask=~missing)


def inject_anomalies(ts: TimeSeries, rate: float, factor: float, seed: int) -> TimeSeries:
    """Overwrite ``ceil(rate * T)`` random cells per feature with ``factor * max``."""
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"anomaly rate must be in [0, 1], got {rate}")
    if factor <= 1.0:
        raise DataError(f"anomaly factor must exceed 1, got {factor}")
    if ts.anomaly_labels.any():
        raise DataError("series already carries anomaly labels")

    rng = np.random.default_rng(seed)
    clean = ts.ground_truth.copy()
    values = ts.values.copy()
    labels = np.zeros(values.shape, dtype=bool)
    # round() guards against e.g. 0.1 * 30 == 3.0000000000000004
    count = math.ceil(round(rate * ts.n_steps, 9))
    for d in range(ts.n_features):
        idx = rng.choice(ts.n_steps, size=count, replace=False)
        values[d, idx] = factor * clean[d].max()
        labels[d, idx] = True
    return replace(ts, values=values, anomaly_labels=labels, truth=clean)


def split_bounds(n_steps: int, fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS) -> tuple[int, int]:
    """End indices (exclusive) of the train and validation segments."""
    train_end = int(math.floor(round(fractions[0] * n_steps, 9)))
    val_end = int(math.floor(round((fractions[0] + fractions[1]) * n_steps, 9)))
    return train_end, val_end


def cell_splits(n_steps: int, fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS) -> np.ndarray:
    """Split name for every time step of a local range."""
    train_end, val_end = split_bounds(n_steps, fractions)
    out = np.empty(n_steps, dtype=object)
    out[:train_end] = "train"
    out[train_end:val_end] = "val"
    out[val_end:] = "test"
    return out


class ClientDataset:
    """Windowed local data of one client.

    A window is designated to the split of its last time step, so training
    windows never touch validation or test cells. Reads of :attr:`windows`
    are logged with the current actor for privacy auditing.
    """

    def __init__(
        self,
        client_id: int,
        features: Sequence[int],
        time_range: tuple[int, int],
        windows: np.ndarray,
        window_obs_masks: np.ndarray,
        split: np.ndarray,
        w: int,
    ):
        self.client_id = int(client_id)
        self.features = tuple(int(f) for f in features)
        self.time_range = (int(time_range[0]), int(time_range[1]))
        self.w = int(w)
        self._windows = _frozen(windows)
        self._masks = _frozen(window_obs_masks)
        self.split = _frozen(np.asarray(split))
        self.access_log: list[str] = []
        expected = (self.n_steps - self.w + 1, len(self.features) * self.w)
        if self._windows.shape != expected or self._masks.shape != expected:
            raise DataError(f"window arrays must have shape {expected}")

    @property
    def windows(self) -> np.ndarray:
        self.access_log.append(current_actor.get())
        return self._windows

    @property
    def window_obs_masks(self) -> np.ndarray:
        return self._masks

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_steps(self) -> int:
        return self.time_range[1] - self.time_range[0]

    @property
    def input_dim(self) -> int:
        return self.n_features * self.w

    @property
    def n_windows(self) -> int:
        return self._windows.shape[0]

    def select(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        rows = self.split == split
        return self.windows[rows], self._masks[rows]

    def cell_split(self) -> np.ndarray:
        return cell_splits(self.n_steps)

    def __repr__(self) -> str:
        return (f"ClientDataset(client_id={self.client_id}, features={len(self.features)}, "
                f"time_range={self.time_range}, windows={self.n_windows})")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def build_client(ts: TimeSeries, client_id: int, features: Sequence[int], time_range: tuple[int, int], w: int) -> ClientDataset:
    start, stop = time_range
    feats = list(features)
    local = ts.values[feats, start:stop]
    mask = ts.obs_mask[feats, start:stop]
    # missing cells enter the model as the standardized mean
    windows, masks = make_windows(np.where(mask, local, 0.0), mask, w)
    window_end = np.arange(w - 1, stop - start)
    split = cell_splits(stop - start)[window_end]
    return ClientDataset(client_id, feats, time_range, windows, masks, split, w)


def partition(ts: TimeSeries, scheme: str, w: int, n_clients: int = 1) -> list[ClientDataset]:
    """Distribute a series over clients and window each client's share.

    ``centralized``: one client with everything. ``multivariate``: ``n_clients``
    contiguous time blocks with all features, the last absorbing the remainder.
    ``univariate``: one client per feature over the full time range.
    """
    d, t = ts.values.shape
    if scheme == "centralized":
        return [build_client(ts, 0, range(d), (0, t), w)]
    if scheme == "multivariate":
        if n_clients < 1:
            raise DataError(f"n_clients must be >= 1, got {n_clients}")
        block = t // n_clients
        clients = []
        for i in range(n_clients):
            start = i * block
            stop = t if i == n_clients - 1 else start + block
            clients.append(build_client(ts, i, range(d), (start, stop), w))
        return clients
    if scheme == "univariate":
        return [build_client(ts, i, [i], (0, t), w) for i in range(d)]
    raise DataError(f"unknown partition scheme {scheme!r}")
