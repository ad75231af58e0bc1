"""Experiment report model and its on-disk forms.

``emit_report`` writes four files:

* ``report.json``  full structured report, timings excluded (deterministic)
* ``rounds.csv``   one row per compression/fine-tuning round (deterministic)
* ``summary.md``   markdown summary table (method, detection, RMSE, size, compression)
* ``timings.json`` wall-clock timings
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, Field

ROUND_COLUMNS = ["round", "stage", "compression_rate", "mean_train_loss", "val_loss",
                 "admm_iterations", "admm_converged"]


class RoundRow(BaseModel):
    round: int
    stage: str
    compression_rate: float
    client_losses: list[float]
    val_loss: float
    admm_iterations: int = 0
    admm_converged: bool = True

    @property
    def mean_train_loss(self) -> float:
        return sum(self.client_losses) / len(self.client_losses)


class DetectionResult(BaseModel):
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    c: float
    threshold_scope: str
    validation_accuracy: Optional[float] = None
    convention: str = "per-point"


class ImputationResult(BaseModel):
    rmse: float
    rmse_mean_fill: float
    missing_cells: int
    units: str = "physical"


class ExperimentReport(BaseModel):
    config: dict
    scheme: str
    n_clients: int
    features_per_client: int
    rounds: list[RoundRow]
    finetune_ran: bool
    n_params: int
    nonzero_params: int
    compression_rate: float
    detection: Optional[DetectionResult] = None
    imputation: Optional[ImputationResult] = None
    timings: dict[str, float] = Field(default_factory=dict)


def rounds_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUND_COLUMNS)
    for r in report.rounds:
        writer.writerow([r.round, r.stage, repr(r.compression_rate), repr(r.mean_train_loss),
                         repr(r.val_loss), r.admm_iterations, int(r.admm_converged)])
    return buf.getvalue()


def _kilo(n: int) -> str:
    return f"{n / 1000:.1f}K" if n >= 1000 else str(n)


def summary_table(reports: Sequence[ExperimentReport], labels: Optional[Sequence[str]] = None) -> str:
    """Markdown table, one row per experiment."""
    labels = labels or [f"{r.scheme}" + (" compressed" if r.compression_rate > 0 else "") for r in reports]
    header = ["Method", "Recall", "Prec", "Acc", "RMSE", "No. Para.", "No. features (sensors) per device",
              "Compress. rate"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for label, r in zip(labels, reports):
        det = r.detection
        cells = [
            label,
            f"{det.recall:.4f}" if det else "-",
            f"{det.precision:.4f}" if det else "-",
            f"{det.accuracy:.4f}" if det else "-",
            f"{r.imputation.rmse:.4f}" if r.imputation else "-",
            _kilo(r.nonzero_params),
            f"M_i={r.features_per_client}",
            f"{100 * r.compression_rate:.2f}%",
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": directory / "report.json",
        "rounds": directory / "rounds.csv",
        "summary": directory / "summary.md",
        "timings": directory / "timings.json",
    }
    body = report.model_dump(mode="json", exclude={"timings"})
    paths["report"].write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    paths["rounds"].write_text(rounds_csv(report))
    paths["summary"].write_text(summary_table([report]))
    paths["timings"].write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n")
    return paths


def load_report(directory) -> ExperimentReport:
    directory = Path(directory)
    body = json.loads((directory / "report.json").read_text())
    timings_path = directory / "timings.json"
    if timings_path.exists():
        body["timings"] = json.loads(timings_path.read_text())
    return ExperimentReport.model_validate(body)
