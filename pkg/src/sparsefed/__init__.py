"""Federated autoencoders with L1/ADMM compression fusion for sensor time series."""

from .autoencoder import (
    LayerSpec,
    ParameterVector,
    ProximalConfig,
    SparsityMask,
    forward,
    gradient,
    init_model,
    local_train,
    masked_loss,
    param_count,
)
from .data import ClientDataset, TimeSeries, inject_anomalies, inject_mcar, load_csv, make_windows, partition, standardize
from .fusion import (
    FusionConfig,
    admm_sparse_fuse,
    average_fuse,
    closed_form_sparse_fuse,
    compression_rate,
    extract_mask,
    masked_average_fuse,
)

__version__ = "0.1.0"
