"""Attack-success-rate evaluation and table assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import apply_perturbation

EVAL_HEADER = ["method", "dataset", "checkpoint", "clean_acc", "pert_acc", "asr_error", "asr_flip"]
HOLE = "NA"


@dataclass
class EvalResult:
    dataset: str
    method: str
    checkpoint: int
    clean_acc: float
    pert_acc: float
    asr_error: float
    asr_flip: float

    def row(self) -> list[str]:
        return [
            self.method, self.dataset, str(self.checkpoint),
            f"{self.clean_acc:.6f}", f"{self.pert_acc:.6f}", f"{self.asr_error:.6f}", f"{self.asr_flip:.6f}",
        ]


def evaluate(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    delta: np.ndarray,
    dataset: str = "",
    method: str = "",
    checkpoint: int = 0,
) -> EvalResult:
    """Score ``delta`` on a test split.

    ``asr_error`` is the error rate on ``clip(x + delta, 0, 1)``;
    ``asr_flip`` the fraction of predictions that change.
    """
    if images.shape[1:] != delta.shape:
        raise ValueError(f"perturbation shape {delta.shape} does not match images {images.shape[1:]}")
    clean = model.predict(images)
    pert = model.predict(apply_perturbation(images, delta.astype(images.dtype)))
    clean_acc = float(np.mean(clean == labels))
    pert_acc = float(np.mean(pert == labels))
    return EvalResult(dataset, method, int(checkpoint), clean_acc, pert_acc, 1.0 - pert_acc, float(np.mean(clean != pert)))


def write_eval_csv(path, results: list[EvalResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for r in results:
            w.writerow(r.row())


def read_eval_csv(path) -> list[EvalResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EvalResult(
            r["dataset"], r["method"], int(r["checkpoint"]),
            float(r["clean_acc"]), float(r["pert_acc"]), float(r["asr_error"]), float(r["asr_flip"]),
        )
        for r in rows
    ]


@dataclass
class ReportTable:
    methods: list[str]
    datasets: list[str]
    cells: dict[str, dict[str, float | None]]
    avg: dict[str, float]
    incomplete: dict[str, bool] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method"] + self.datasets + ["AVG"])
            for m in self.methods:
                cells = [HOLE if self.cells[m][d] is None else f"{self.cells[m][d]:.6f}" for d in self.datasets]
                avg = self.avg[m]
                w.writerow([m] + cells + [HOLE if math.isnan(avg) else f"{avg:.6f}"])

    def to_json(self, path) -> None:
        doc = asdict(self)
        doc["avg"] = {m: (None if math.isnan(v) else v) for m, v in self.avg.items()}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _ordered_unique(values) -> list:
    seen = {}
    for v in values:
        seen.setdefault(v, None)
    return list(seen)


def build_report(results: list[EvalResult], methods=None, datasets=None) -> ReportTable:
    """Best ASR (error rate) over checkpoints per (method, dataset), plus an AVG column.

    Missing cells stay ``None``; their row's AVG covers the present cells and
    is flagged in ``incomplete``.
    """
    methods = list(methods) if methods is not None else _ordered_unique(r.method for r in results)
    datasets = list(datasets) if datasets is not None else _ordered_unique(r.dataset for r in results)
    best: dict[tuple[str, str], float] = {}
    for r in results:
        key = (r.method, r.dataset)
        best[key] = max(best.get(key, -math.inf), r.asr_error)
    cells, avg, incomplete = {}, {}, {}
    for m in methods:
        cells[m] = {d: best.get((m, d)) for d in datasets}
        present = [v for v in cells[m].values() if v is not None]
        avg[m] = float(np.mean(present)) if present else math.nan
        incomplete[m] = len(present) < len(datasets)
    return ReportTable(methods, datasets, cells, avg, incomplete)
