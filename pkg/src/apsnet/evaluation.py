"""Confusion matrices and macro-averaged classification metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# Table-3 numbers for the original model on the (private) APS corpus; kept
# for report context only.
REFERENCE_APS = {"accuracy": 0.902, "precision": 0.777, "recall": 0.777, "f1": 0.775}


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[ClassMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference_aps"] = dict(REFERENCE_APS, reproducible=False)
        return d


def confusion(preds, truth, num_classes: int) -> np.ndarray:
    """N×N counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {truth.size} labels")
    for arr in (preds, truth):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=float), where=b > 0)


def metrics(cm: np.ndarray, class_names=None) -> MetricsReport:
    """One-vs-rest precision/recall/F1 per class, macro means and accuracy.

    Classes whose denominator is zero score 0 for that metric.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.size == 0 or total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(0).astype(float)
    support = cm.sum(1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support.astype(float))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    names = class_names or [str(i) for i in range(len(cm))]
    per_class = [
        ClassMetrics(names[i], float(precision[i]), float(recall[i]), float(f1[i]), int(support[i]))
        for i in range(len(cm))
    ]
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        per_class=per_class,
    )


def per_class_report(cm: np.ndarray, class_names, path: str | Path | None = None) -> list[list]:
    """Rows ``class,precision,recall,f1,support`` in class order; optionally written as CSV."""
    if len(class_names) != len(cm):
        raise ValueError("class_names length must match the confusion matrix")
    report = metrics(cm, list(class_names))
    rows = [["class", "precision", "recall", "f1", "support"]]
    rows += [[c.name, c.precision, c.recall, c.f1, c.support] for c in report.per_class]
    if path is not None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return rows


def write_report_json(report: MetricsReport, path: str | Path, **extra) -> None:
    d = report.to_dict()
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2))
