"""Classification metrics (OA, AA, Cohen's kappa), cloudy/clear subset
reports and per-modality loss traces."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

TRACE_HEADER = ["epoch", "batch", "loss_opt", "loss_sar", "loss_src",
                "rho_opt_pre", "rho_opt", "rho_sar_pre", "rho_sar"]
SCORE_HEADER = ["epoch", "batch", "batch_size", "sum_s_opt", "sum_s_sar"]


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (M, M) int64, rows = true class, cols = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class_recall: list[float | None]
    subset: str = "all"
    n: int = 0
    degenerate_kappa: bool = False
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subset": self.subset,
            "n": self.n,
            "oa": round(self.oa, 6),
            "aa": round(self.aa, 6),
            "kappa": round(self.kappa, 6),
            "per_class_recall": [None if r is None else round(r, 6) for r in self.per_class_recall],
            "degenerate_kappa": self.degenerate_kappa,
            "confusion": self.confusion,
        }


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    t = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.size != t.size or p.size == 0:
        raise InvalidInputError(f"preds ({p.size}) and labels ({t.size}) must have equal non-zero length")
    for name, a in (("preds", p), ("labels", t)):
        if a.min() < 0 or a.max() >= num_classes:
            raise InvalidInputError(f"{name} contain indices outside [0, {num_classes})")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64))


def metrics(cm: ConfusionMatrix, subset: str = "all") -> MetricsReport:
    c = cm.counts.astype(np.float64)
    n = c.sum()
    if n <= 0:
        raise InvalidInputError("metrics need a non-empty confusion matrix")
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    diag = np.diag(c)
    p_o = diag.sum() / n
    p_e = float((rows * cols).sum() / (n * n))
    recalls: list[float | None] = [float(diag[k] / rows[k]) if rows[k] > 0 else None for k in range(len(rows))]
    present = [r for r in recalls if r is not None]
    aa = float(np.mean(present))
    degenerate = abs(1.0 - p_e) < 1e-15
    if degenerate:
        warnings.warn("kappa undefined (p_e = 1); reporting 1.0 if p_o = 1 else 0.0", RuntimeWarning)
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = float((p_o - p_e) / (1.0 - p_e))
    return MetricsReport(
        oa=float(p_o), aa=aa, kappa=kappa, per_class_recall=recalls, subset=subset,
        n=int(n), degenerate_kappa=degenerate, confusion=cm.counts.tolist(),
    )


def subset_metrics(preds, labels, cloud_flags, num_classes: int
                   ) -> tuple[MetricsReport | None, MetricsReport | None]:
    """(cloud_covered, cloud_free) reports; an empty subset yields None."""
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    f = np.asarray(cloud_flags, dtype=bool)
    if not (p.size == t.size == f.size):
        raise InvalidInputError("preds, labels and cloud flags must be aligned")
    out = []
    for mask, tag in ((f, "cloud_covered"), (~f, "cloud_free")):
        if mask.any():
            out.append(metrics(confusion_matrix(p[mask], t[mask], num_classes), subset=tag))
        else:
            out.append(None)
    return out[0], out[1]


def write_metrics(path: str | Path, reports: dict[str, MetricsReport | None]) -> None:
    payload = {k: (None if v is None else v.to_dict()) for k, v in reports.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# loss traces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    batch: int
    loss_opt: float
    loss_sar: float
    loss_src: float
    rho_opt_pre: float
    rho_opt: float
    rho_sar_pre: float
    rho_sar: float


@dataclass
class LossTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records:
            last = self.records[-1]
            if (rec.epoch, rec.batch) <= (last.epoch, last.batch):
                raise InvalidInputError("trace records must be appended in (epoch, batch) order")
        self.records.append(rec)

    def epoch_means(self, column: str) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for r in self.records:
            sums.setdefault(r.epoch, []).append(getattr(r, column))
        return {e: float(np.mean(v)) for e, v in sorted(sums.items())}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([r.epoch, r.batch] + [repr(float(getattr(r, c))) for c in TRACE_HEADER[2:]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "LossTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != TRACE_HEADER:
                raise InvalidInputError(f"{path}: unexpected trace header {reader.fieldnames}")
            for row in reader:
                trace.append(TraceRecord(int(row["epoch"]), int(row["batch"]),
                                         *[float(row[c]) for c in TRACE_HEADER[2:]]))
        return trace


def record_loss_trace(breakdowns: Iterable, path: str | Path | None = None) -> LossTrace:
    """Build a trace from F2 loss breakdowns (objects with epoch/batch/loss/rho fields)."""
    trace = LossTrace()
    for b in breakdowns:
        trace.append(TraceRecord(b.epoch, b.batch, b.loss_opt, b.loss_sar, b.loss_src,
                                 b.rho_opt_pre, b.rho_opt, b.rho_sar_pre, b.rho_sar))
    if path is not None:
        trace.write_csv(path)
    return trace


def _norm_slope(means: dict[int, float]) -> float | None:
    first = means[min(means)]
    last = means[max(means)]
    if first == 0:
        return None
    # clipped so that the gap stays within [0, 2]
    return float(np.clip((first - last) / first, -1.0, 1.0))


def descent_gap(trace: LossTrace) -> float | None:
    """|relative decline of loss_opt - relative decline of loss_sar| between the
    first and last epoch means; None when undefined."""
    m_opt = trace.epoch_means("loss_opt")
    m_sar = trace.epoch_means("loss_sar")
    if len(m_opt) < 2:
        raise InvalidInputError("descent_gap needs a trace with at least 2 epochs")
    s_opt, s_sar = _norm_slope(m_opt), _norm_slope(m_sar)
    if s_opt is None or s_sar is None:
        return None
    return abs(s_opt - s_sar)
