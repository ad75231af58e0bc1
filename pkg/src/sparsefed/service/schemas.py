"""Request and response bodies of the HTTP service."""

from __future__ import annotations

import base64
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..autoencoder import ParameterVector
from ..report import DetectionResult, ExperimentReport, ImputationResult


def encode_model(model: ParameterVector) -> str:
    return base64.b64encode(model.to_bytes()).decode("ascii")


def decode_model(text: str) -> ParameterVector:
    return ParameterVector.from_bytes(base64.b64decode(text, validate=True))


class Health(BaseModel):
    status: str = "ok"
    version: str


class JobStatus(BaseModel):
    job_id: str
    status: Literal["queued", "running", "done", "failed"]
    report: Optional[ExperimentReport] = None
    model: Optional[str] = Field(None, description="base64 of the final global model")
    error: Optional[str] = None


class FuseRequest(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    models: list[str] = Field(min_length=1, description="base64 of serialized parameter vectors")
    method: Literal["average", "admm", "closed_form"] = "admm"
    lam: float = Field(0.0, ge=0, alias="lambda")
    b: float = Field(1.0, gt=0)
    tol: float = Field(1e-8, gt=0)
    max_iters: int = Field(500, ge=1)


class FuseResponse(BaseModel):
    model: str
    iterations: int
    converged: bool
    compression_rate: float
    nonzero_params: int


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict
    model: str


class EvalResponse(BaseModel):
    detection: Optional[DetectionResult] = None
    imputation: Optional[ImputationResult] = None
    compression_rate: float
    nonzero_params: int
