"""Dense autoencoder on flat parameter vectors, written directly in numpy.

The whole model lives in a single float64 vector so that the server can fuse,
threshold and mask it coordinate-wise. Hidden layers use ReLU, the output
layer is linear.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import ClientDataset


class ModelError(ValueError):
    pass


class NoObservedValuesWarning(UserWarning):
    """A reconstruction loss was requested on a window with no observed cells."""


@dataclass(frozen=True)
class LayerSpec:
    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if any(s < 1 for s in self.sizes):
            raise ModelError(f"layer widths must be >= 1, got {self.sizes}")

    def shape_meta(self, input_dim: int) -> tuple[tuple[int, int, int], ...]:
        if input_dim < 1:
            raise ModelError(f"input_dim must be >= 1, got {input_dim}")
        dims = (input_dim, *self.sizes, input_dim)
        return tuple((dims[k + 1], dims[k], dims[k + 1]) for k in range(len(dims) - 1))


@dataclass(frozen=True)
class ProximalConfig:
    mu: float = 0.01
    epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32
    # derivative of mu * ||theta - theta_g||^2 is 2 * mu * (theta - theta_g)
    prox_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.mu < 0:
            raise ModelError("mu must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ModelError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ModelError("learning_rate must be nonnegative")


@dataclass(eq=False)
class ParameterVector:
    """All weights and biases of a model, flattened layer by layer.

    ``shape_meta[k] = (rows, cols, bias_len)`` for the affine map of layer
    ``k``; its weight matrix (row-major) precedes its bias in :attr:`flat`.
    """

    flat: np.ndarray
    shape_meta: tuple[tuple[int, int, int], ...]

    def __post_init__(self) -> None:
        self.flat = np.asarray(self.flat, dtype=np.float64)
        self.shape_meta = tuple(tuple(int(v) for v in m) for m in self.shape_meta)
        expected = sum(r * c + b for r, c, b in self.shape_meta)
        if self.flat.ndim != 1 or self.flat.size != expected:
            raise ModelError(f"flat vector has {self.flat.size} entries, metadata implies {expected}")

    def __len__(self) -> int:
        return self.flat.size

    @property
    def input_dim(self) -> int:
        return self.shape_meta[0][1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views into :attr:`flat` (writes propagate)."""
        return _views(self.flat, self.shape_meta)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.flat.copy(), self.shape_meta)

    def with_flat(self, flat: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(flat, dtype=np.float64), self.shape_meta)

    def same_architecture(self, other: "ParameterVector") -> bool:
        return self.shape_meta == other.shape_meta

    def to_bytes(self) -> bytes:
        header = struct.pack("<I", len(self.shape_meta))
        header += b"".join(struct.pack("<III", *m) for m in self.shape_meta)
        return header + self.flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterVector":
        try:
            (n_layers,) = struct.unpack_from("<I", blob, 0)
            meta = [struct.unpack_from("<III", blob, 4 + 12 * k) for k in range(n_layers)]
        except struct.error as exc:
            raise ModelError(f"truncated parameter header: {exc}") from None
        offset = 4 + 12 * n_layers
        flat = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
        return cls(flat, tuple(meta))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterVector":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SparsityMask:
    bits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    def __len__(self) -> int:
        return self.bits.size

    @property
    def support(self) -> int:
        return int(self.bits.sum())


def _views(flat: np.ndarray, meta) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    pos = 0
    for rows, cols, blen in meta:
        w = flat[pos:pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        b = flat[pos:pos + blen]
        pos += blen
        out.append((w, b))
    return out


def param_count(input_dim: int, layers: LayerSpec | Sequence[int]) -> int:
    if not isinstance(layers, LayerSpec):
        layers = LayerSpec(tuple(layers))
    return sum(r * c + b for r, c, b in layers.shape_meta(input_dim))


def init_model(input_dim: int, layers: LayerSpec | Sequence[int], seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases."""
    if not isinstance(layers, LayerSpec):
        layers = LayerSpec(tuple(layers))
    meta = layers.shape_meta(input_dim)
    rng = np.random.default_rng(seed)
    model = ParameterVector(np.zeros(sum(r * c + b for r, c, b in meta)), meta)
    for w, _ in model.layers():
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return model


def _forward_all(layers, x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer for a batch; element 0 is the input."""
    acts = [x]
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        acts.append(z if k == last else np.maximum(z, 0.0))
    return acts


def forward(model: ParameterVector, x: np.ndarray) -> np.ndarray:
    """Reconstruct a single window ``(L,)`` or a batch ``(B, L)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise ModelError(f"input has length {x.shape[-1]}, model expects {model.input_dim}")
    return _forward_all(model.layers(), x)[-1]


def masked_loss(x: np.ndarray, x_hat: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over observed positions."""
    x, x_hat, mask = np.asarray(x, float), np.asarray(x_hat, float), np.asarray(mask, bool)
    n_obs = int(mask.sum())
    if n_obs == 0:
        warnings.warn("no observed values in window", NoObservedValuesWarning, stacklevel=2)
        return 0.0
    diff = (x - x_hat)[mask]
    return float(diff @ diff / n_obs)


def _window_weights(masks: np.ndarray) -> np.ndarray:
    counts = masks.sum(axis=1).astype(float)
    return np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)


def batch_loss(model: ParameterVector, windows: np.ndarray, masks: np.ndarray) -> float:
    """Batch mean of per-window :func:`masked_loss`; windows with nothing observed count as 0."""
    if len(windows) == 0:
        return 0.0
    resid = (forward(model, windows) - windows) * masks
    return float(np.mean((resid ** 2).sum(axis=1) * _window_weights(masks)))


def objective(model: ParameterVector, windows, masks, global_ref: ParameterVector, mu: float) -> float:
    """Local training objective: batch loss plus ``mu * ||theta - theta_g||^2``."""
    diff = model.flat - global_ref.flat
    return batch_loss(model, windows, masks) + mu * float(diff @ diff)


def _data_gradient(layers, windows: np.ndarray, masks: np.ndarray, out: np.ndarray, meta) -> float:
    """Write the batch-loss gradient into ``out``; returns the batch loss."""
    out[...] = 0.0
    n = len(windows)
    if n == 0:
        return 0.0
    acts = _forward_all(layers, windows)
    weights = _window_weights(masks)
    resid = (acts[-1] - windows) * masks
    loss = float(np.mean((resid ** 2).sum(axis=1) * weights))

    grads = _views(out, meta)
    delta = resid * (2.0 * weights / n)[:, None]
    for k in range(len(layers) - 1, -1, -1):
        gw, gb = grads[k]
        np.matmul(delta.T, acts[k], out=gw)
        delta.sum(axis=0, out=gb)
        if k:
            delta = (delta @ layers[k][0]) * (acts[k] > 0)
    return loss


def gradient(
    model: ParameterVector,
    windows: np.ndarray,
    masks: np.ndarray,
    global_ref: ParameterVector,
    mu: float,
    prox_factor: float = 2.0,
) -> ParameterVector:
    """Gradient of :func:`objective` with respect to the model parameters."""
    if len(global_ref) != len(model):
        raise ModelError("global reference and model have different lengths")
    windows = np.asarray(windows, dtype=float).reshape(-1, model.input_dim)
    masks = np.asarray(masks, dtype=bool).reshape(-1, model.input_dim)
    g = np.empty_like(model.flat)
    _data_gradient(model.layers(), windows, masks, g, model.shape_meta)
    g += prox_factor * mu * (model.flat - global_ref.flat)
    return model.with_flat(g)


def sgd(
    model: ParameterVector,
    windows: np.ndarray,
    masks: np.ndarray,
    global_ref: ParameterVector,
    cfg: ProximalConfig,
    grad_mask: Optional[SparsityMask] = None,
    seed: Optional[int] = None,
) -> tuple[ParameterVector, list[float]]:
    """Mini-batch SGD on the proximal objective; returns the model and per-epoch mean batch loss."""
    if len(global_ref) != len(model):
        raise ModelError("global reference and model have different lengths")
    if grad_mask is not None and len(grad_mask) != len(model):
        raise ModelError("gradient mask and model have different lengths")
    if len(windows) == 0:
        raise ModelError("empty training set")

    theta = model.flat.copy()
    layers = _views(theta, model.shape_meta)
    anchor = global_ref.flat
    frozen = None if grad_mask is None else ~grad_mask.bits
    g = np.empty_like(theta)
    rng = np.random.default_rng(seed)
    n = len(windows)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            losses.append(_data_gradient(layers, windows[rows], masks[rows], g, model.shape_meta))
            if cfg.mu:
                g += (cfg.prox_factor * cfg.mu) * (theta - anchor)
            if frozen is not None:
                g[frozen] = 0.0
            theta -= cfg.learning_rate * g
        history.append(float(np.mean(losses)))
    return model.with_flat(theta), history


def local_train(
    model: ParameterVector,
    data: ClientDataset,
    global_ref: ParameterVector,
    cfg: ProximalConfig,
    grad_mask: Optional[SparsityMask] = None,
    seed: Optional[int] = None,
) -> ParameterVector:
    """Train on the client's training windows; masked coordinates are left bit-identical."""
    windows, masks = data.select("train")
    trained, _ = sgd(model, windows, masks, global_ref, cfg, grad_mask, seed)
    return trained


def reconstruct_windows(model: ParameterVector, windows: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty_like(windows, dtype=float)
    for start in range(0, len(windows), chunk):
        out[start:start + chunk] = forward(model, windows[start:start + chunk])
    return out
