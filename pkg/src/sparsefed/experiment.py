"""End-to-end experiment: data prep, partition, both stages, evaluation."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autoencoder import ParameterVector, SparsityMask, param_count
from .config import ExperimentConfig
from .data import (
    ClientDataset,
    NormalizationStats,
    TimeSeries,
    cell_splits,
    inject_anomalies,
    inject_mcar,
    load_csv,
    partition,
    standardize,
)
from .fusion import compression_rate, extract_mask
from .metrics import (
    calibrate_threshold,
    cell_errors,
    detection_metrics,
    imputation_rmse,
    reconstruct_series,
    tune_c,
)
from .orchestrator import (
    COMPRESSION,
    FINETUNE,
    Checkpointer,
    Client,
    FederationTopology,
    RoundRecord,
    run_compression_stage,
    run_finetune_stage,
)
from .report import DetectionResult, ExperimentReport, ImputationResult, RoundRow
from .synthetic import generate_synthetic

logger = logging.getLogger(__name__)


@dataclass
class PreparedData:
    raw: TimeSeries  # physical units, corrupted
    scaled: TimeSeries
    stats: NormalizationStats
    clients: list[ClientDataset]


def load_series(cfg: ExperimentConfig) -> TimeSeries:
    src = cfg.data
    if src.synthetic is not None:
        return generate_synthetic(src.synthetic.to_spec())
    ts = load_csv(src.csv.path, delimiter=src.csv.delimiter, header=src.csv.header)
    if src.csv.features is not None:
        ts = ts.select_features(src.csv.features)
    return ts


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    ts = load_series(cfg)
    corr = cfg.corruption
    if corr.task == "imputation":
        ts = inject_mcar(ts, corr.rate, cfg.corruption_seed)
    else:
        ts = inject_anomalies(ts, corr.rate, corr.factor, cfg.corruption_seed)
    scaled, stats = standardize(ts, cfg.data.train_fraction)
    clients = partition(scaled, cfg.scheme.name, cfg.w, cfg.scheme.n_clients)
    return PreparedData(ts, scaled, stats, clients)


def build_topology(cfg: ExperimentConfig, clients: list[ClientDataset]) -> FederationTopology:
    proximal = cfg.client.to_proximal()
    return FederationTopology(clients, cfg.layer_spec, cfg.scheme.name, [proximal] * len(clients))


def _local_slice(data: ClientDataset):
    start, stop = data.time_range
    return list(data.features), slice(start, stop)


def evaluate_detection(cfg: ExperimentConfig, model: ParameterVector, prep: PreparedData,
                       clients: Optional[list[Client]] = None) -> DetectionResult:
    """Calibrate on train cells, tune ``c`` on validation cells, report test cells."""
    clients = clients or build_topology(cfg, prep.clients).make_clients()
    errs, truths, splits = [], [], []
    for client, data in zip(clients, prep.clients):
        errs.append(client.evaluate(cell_errors, model))
        feats, span = _local_slice(data)
        truths.append(prep.raw.anomaly_labels[feats, span])
        splits.append(cell_splits(data.n_steps))

    def part(arrays, name):
        return [a[:, s == name] for a, s in zip(arrays, splits)]

    train_e, val_e, test_e = part(errs, "train"), part(errs, "val"), part(errs, "test")
    val_t, test_t = part(truths, "val"), part(truths, "test")
    scope = cfg.corruption.threshold_scope
    if scope == "global":
        train_e, val_e, test_e = ([np.concatenate([e.ravel() for e in xs])] for xs in (train_e, val_e, test_e))
        val_t, test_t = ([np.concatenate([t.ravel() for t in xs])] for xs in (val_t, test_t))
    stats = [calibrate_threshold(e.ravel(), 0.0)[0] for e in train_e]

    val_acc = None
    c = cfg.corruption.c
    if cfg.corruption.c_grid:
        c, val_acc = tune_c(val_e, val_t, stats, cfg.corruption.c_grid)
    pred = np.concatenate([(e > s.mean + c * s.std).ravel() for e, s in zip(test_e, stats)])
    truth = np.concatenate([t.ravel() for t in test_t])
    m = detection_metrics(pred, truth)
    return DetectionResult(**asdict(m), c=c, threshold_scope=scope, validation_accuracy=val_acc)


def evaluate_imputation(cfg: ExperimentConfig, model: ParameterVector, prep: PreparedData,
                        clients: Optional[list[Client]] = None) -> ImputationResult:
    """RMSE in physical units over missing cells of every client's test segment."""
    clients = clients or build_topology(cfg, prep.clients).make_clients()
    recon = np.zeros_like(prep.scaled.values)
    in_test = np.zeros(recon.shape, dtype=bool)
    for client, data in zip(clients, prep.clients):
        feats, span = _local_slice(data)
        recon[feats, span] = client.evaluate(reconstruct_series, model)
        in_test[feats, span] = (cell_splits(data.n_steps) == "test")[None, :]
    physical = prep.stats.inverse(recon)
    missing = ~prep.raw.obs_mask & in_test
    truth = prep.raw.ground_truth
    mean_fill = np.broadcast_to(prep.stats.mean[:, None], truth.shape)
    return ImputationResult(
        rmse=imputation_rmse(truth, physical, missing),
        rmse_mean_fill=imputation_rmse(truth, mean_fill, missing),
        missing_cells=int(missing.sum()),
    )


def evaluate_model(cfg: ExperimentConfig, model: ParameterVector, prep: Optional[PreparedData] = None,
                   clients: Optional[list[Client]] = None):
    prep = prep or prepare_data(cfg)
    if cfg.corruption.task == "anomaly":
        return evaluate_detection(cfg, model, prep, clients)
    return evaluate_imputation(cfg, model, prep, clients)


def _row(rec: RoundRecord) -> RoundRow:
    return RoundRow(**asdict(rec))


def run_experiment(cfg: ExperimentConfig, threads: int = 1, checkpoint_dir=None,
                   resume: bool = False) -> ExperimentReport:
    """Run the full pipeline. With ``checkpoint_dir`` the state is saved after every
    round; ``resume`` continues from the last saved round."""
    return train_and_report(cfg, threads, checkpoint_dir, resume)[0]


def train_and_report(cfg: ExperimentConfig, threads: int = 1, checkpoint_dir=None,
                     resume: bool = False) -> tuple[ExperimentReport, ParameterVector]:
    """Same as ``run_experiment`` but also hands back the final global model."""
    timings = {}
    t0 = time.perf_counter()
    prep = prepare_data(cfg)
    topology = build_topology(cfg, prep.clients)
    schedule = cfg.schedule.to_schedule()
    timings["data"] = time.perf_counter() - t0

    records: list[RoundRecord] = []
    ckpt = Checkpointer(checkpoint_dir) if checkpoint_dir is not None else None

    def on_round(rec: RoundRecord, model: ParameterVector, mask: Optional[SparsityMask]) -> None:
        records.append(rec)
        if ckpt is not None:
            ckpt(rec, model, mask, records)

    model = None
    comp_start, fine_start = 1, 1
    if resume and ckpt is not None and (state := ckpt.load()) is not None:
        stage, done, model, saved = state
        records.extend(saved)
        if stage == COMPRESSION:
            comp_start = done + 1
        else:
            comp_start, fine_start = schedule.compression_rounds + 1, done + 1
        logger.info("resuming after %s round %d", stage, done)

    pool = ThreadPoolExecutor(threads) if threads > 1 else nullcontext()
    with pool as executor:
        t = time.perf_counter()
        if comp_start <= schedule.compression_rounds:
            model, _ = run_compression_stage(topology, schedule, cfg.fusion.to_fusion(), cfg.seed,
                                             initial=model, start_round=comp_start,
                                             executor=executor, on_round=on_round)
        timings["compression"] = time.perf_counter() - t

        t = time.perf_counter()
        rate = compression_rate(model, cfg.fusion.zero_tol)
        finetune = rate >= schedule.compression_rate_target
        if finetune and fine_start <= schedule.finetune_rounds:
            mask = None
            if fine_start > 1:
                mask = SparsityMask(np.load(Path(checkpoint_dir) / "mask.npy"))
            model, _ = run_finetune_stage(topology, model, schedule, cfg.seed, cfg.fusion.zero_tol,
                                          start_round=fine_start, mask=mask,
                                          executor=executor, on_round=on_round)
        elif not finetune:
            logger.info("compression rate %.4f below target %.4f; skipping fine-tuning",
                        rate, schedule.compression_rate_target)
        timings["finetune"] = time.perf_counter() - t

    t = time.perf_counter()
    result = evaluate_model(cfg, model, prep, topology.make_clients())
    timings["evaluation"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0

    n_params = param_count(topology.input_dim, cfg.layer_spec)
    nonzero = int(extract_mask(model, cfg.fusion.zero_tol).support)
    report = ExperimentReport(
        config=cfg.echo(),
        scheme=cfg.scheme.name,
        n_clients=len(prep.clients),
        features_per_client=prep.clients[0].n_features,
        rounds=[_row(r) for r in records],
        finetune_ran=finetune,
        n_params=n_params,
        nonzero_params=nonzero,
        compression_rate=(n_params - nonzero) / n_params,
        detection=result if isinstance(result, DetectionResult) else None,
        imputation=result if isinstance(result, ImputationResult) else None,
        timings=timings,
    )
    return report, model
