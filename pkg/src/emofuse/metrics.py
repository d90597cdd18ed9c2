"""Confusion-matrix metrics (UA/WA, precision, recall, F1 variants)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class MetricsReport:
    confusion: list[list[int]]
    acc_unweighted: float  # mean per-class recall
    acc_weighted: float  # overall fraction correct
    precision: float  # macro over classes with support
    recall: float  # macro over classes with support
    micro_f1: float
    weighted_f1: float
    per_class: list[dict] = field(default_factory=list)

    @property
    def n(self) -> int:
        return int(np.sum(self.confusion))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], C: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def _ratio(a: float, b: float) -> float:
    return float(a / b) if b > 0 else 0.0


def metrics_from_confusion(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix entries must be non-negative")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)

    per_class = []
    prec, rec, f1 = [], [], []
    for c in range(cm.shape[0]):
        p = _ratio(tp[c], predicted[c])
        r = _ratio(tp[c], support[c])
        f = _ratio(2 * p * r, p + r)
        prec.append(p)
        rec.append(r)
        f1.append(f)
        per_class.append({"class": c, "support": int(support[c]), "precision": p, "recall": r, "f1": f})
    has = support > 0
    prec, rec, f1 = np.array(prec), np.array(rec), np.array(f1)

    pooled_tp = tp.sum()
    micro_p = _ratio(pooled_tp, predicted.sum())
    micro_r = _ratio(pooled_tp, support.sum())
    return MetricsReport(
        confusion=cm.tolist(),
        acc_unweighted=float(rec[has].mean()),
        acc_weighted=float(pooled_tp / total),
        precision=float(prec[has].mean()),
        recall=float(rec[has].mean()),
        micro_f1=_ratio(2 * micro_p * micro_r, micro_p + micro_r),
        weighted_f1=float(np.sum(f1 * support) / support.sum()),
        per_class=per_class,
    )


def format_table(report: MetricsReport, class_names: Sequence[str] | None = None) -> str:
    lines = [
        f"{'metric':<16}{'value':>10}",
        f"{'ACC (UA)':<16}{report.acc_unweighted:>10.4f}",
        f"{'WACC (WA)':<16}{report.acc_weighted:>10.4f}",
        f"{'WF1':<16}{report.weighted_f1:>10.4f}",
        f"{'precision':<16}{report.precision:>10.4f}",
        f"{'recall':<16}{report.recall:>10.4f}",
        f"{'micro-F1':<16}{report.micro_f1:>10.4f}",
        "",
        f"{'class':<14}{'support':>8}{'prec':>8}{'recall':>8}{'f1':>8}",
    ]
    for row in report.per_class:
        name = class_names[row["class"]] if class_names else str(row["class"])
        lines.append(f"{name:<14}{row['support']:>8d}{row['precision']:>8.3f}{row['recall']:>8.3f}{row['f1']:>8.3f}")
    return "\n".join(lines)
