"""HTTP front end: experiments run as background jobs; fusion, evaluation and
data generation are answered inline."""

from __future__ import annotations

import io
import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from .. import __version__
from ..autoencoder import ModelError
from ..config import ConfigError, ExperimentConfig, SyntheticSource, validate_config
from ..data import DataError, write_csv
from ..experiment import evaluate_model, train_and_report
from ..fusion import (
    FusionConfig,
    FusionError,
    admm_sparse_fuse,
    average_fuse,
    closed_form_sparse_fuse,
    compression_rate,
    extract_mask,
)
from ..metrics import MetricsError
from ..report import DetectionResult
from ..synthetic import generate_synthetic
from .schemas import (
    EvalRequest,
    EvalResponse,
    FuseRequest,
    FuseResponse,
    Health,
    JobStatus,
    decode_model,
    encode_model,
)

logger = logging.getLogger(__name__)


class JobStore:
    def __init__(self, workers: int = 1, threads_per_job: int = 1):
        self._pool = ThreadPoolExecutor(workers)
        self._jobs: dict[str, JobStatus] = {}
        self._lock = threading.Lock()
        self.threads_per_job = threads_per_job

    def submit(self, cfg: ExperimentConfig) -> str:
        job_id = uuid.uuid4().hex
        with self._lock:
            self._jobs[job_id] = JobStatus(job_id=job_id, status="queued")
        self._pool.submit(self._run, job_id, cfg)
        return job_id

    def _set(self, job_id: str, **fields) -> None:
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=fields)

    def _run(self, job_id: str, cfg: ExperimentConfig) -> None:
        self._set(job_id, status="running")
        try:
            report, model = train_and_report(cfg, threads=self.threads_per_job)
        except Exception as exc:
            logger.exception("job %s failed", job_id)
            self._set(job_id, status="failed", error=f"{type(exc).__name__}: {exc}")
        else:
            self._set(job_id, status="done", report=report, model=encode_model(model))

    def get(self, job_id: str) -> Optional[JobStatus]:
        with self._lock:
            return self._jobs.get(job_id)


def _decode(text: str):
    try:
        return decode_model(text)
    except (ValueError, ModelError) as exc:
        raise HTTPException(400, f"bad model encoding: {exc}") from None


def create_app(workers: int = 1, threads_per_job: int = 1) -> FastAPI:
    app = FastAPI(title="sparsefed", version=__version__)
    jobs = JobStore(workers, threads_per_job)
    app.state.jobs = jobs

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.post("/experiments", response_model=JobStatus, status_code=202)
    def submit_experiment(config: ExperimentConfig):
        return jobs.get(jobs.submit(config))

    @app.post("/experiments/run", response_model=JobStatus)
    def run_experiment_inline(config: ExperimentConfig):
        """Run to completion before answering; for the CLI and small configs."""
        try:
            report, model = train_and_report(config, threads=jobs.threads_per_job)
        except (DataError, ValueError) as exc:
            raise HTTPException(400, str(exc)) from None
        return JobStatus(job_id="inline", status="done", report=report, model=encode_model(model))

    @app.get("/experiments/{job_id}", response_model=JobStatus)
    def experiment_status(job_id: str):
        status = jobs.get(job_id)
        if status is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return status

    @app.post("/fuse", response_model=FuseResponse)
    def fuse(req: FuseRequest):
        models = [_decode(m) for m in req.models]
        try:
            if req.method == "average":
                out, iters, ok = average_fuse(models), 0, True
            elif req.method == "closed_form":
                out, iters, ok = closed_form_sparse_fuse(models, req.lam), 0, True
            else:
                res = admm_sparse_fuse(models, FusionConfig(req.lam, req.b, req.max_iters, req.tol))
                out, iters, ok = res.model, res.iterations, res.converged
        except FusionError as exc:
            raise HTTPException(400, str(exc)) from None
        return FuseResponse(model=encode_model(out), iterations=iters, converged=ok,
                            compression_rate=compression_rate(out), nonzero_params=extract_mask(out).support)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        try:
            cfg = validate_config(req.config)
        except ConfigError as exc:
            raise HTTPException(422, exc.violations) from None
        model = _decode(req.model)
        zero_tol = cfg.fusion.zero_tol
        try:
            result = evaluate_model(cfg, model)
        except (DataError, MetricsError, ModelError) as exc:
            raise HTTPException(400, str(exc)) from None
        det = isinstance(result, DetectionResult)
        return EvalResponse(
            detection=result if det else None,
            imputation=None if det else result,
            compression_rate=compression_rate(model, zero_tol),
            nonzero_params=extract_mask(model, zero_tol).support,
        )

    @app.post("/generate", response_class=PlainTextResponse)
    def generate(spec: SyntheticSource):
        ts = generate_synthetic(spec.to_spec())
        buf = io.StringIO()
        write_csv(ts, buf)
        return PlainTextResponse(buf.getvalue(), media_type="text/csv")

    return app


app = create_app()
