"""Classification metrics for the three congestion levels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

CONGESTED = 2
CLASS_WEIGHTS = (0.2, 0.2, 0.6)
METRIC_COLUMNS = ("accuracy", "recall", "precision", "c_f1", "w_f1", "f1_0", "f1_1", "f1_2", "n")


def _div(a: float, b: float) -> float:
    return float(a) / float(b) if b else 0.0


def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> np.ndarray:
    """``cm[i, j]`` counts true class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class MetricReport:
    accuracy: float
    recall: float
    precision: float
    c_f1: float
    w_f1: float
    confusion: np.ndarray
    per_class_f1: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def as_row(self) -> Dict[str, float]:
        row = {
            "accuracy": self.accuracy,
            "recall": self.recall,
            "precision": self.precision,
            "c_f1": self.c_f1,
            "w_f1": self.w_f1,
        }
        row.update({f"f1_{k}": float(v) for k, v in enumerate(self.per_class_f1)})
        row["n"] = self.n
        return row

    def headline(self) -> str:
        return (f"Accuracy={self.accuracy:.4f} Recall={self.recall:.4f} Precision={self.precision:.4f} "
                f"W-F1={self.w_f1:.4f} C-F1={self.c_f1:.4f}")


def report_from_confusion(cm: np.ndarray) -> MetricReport:
    cm = np.asarray(cm)
    f1 = np.zeros(cm.shape[0])
    for k in range(cm.shape[0]):
        tp = cm[k, k]
        p = _div(tp, cm[:, k].sum())
        r = _div(tp, cm[k, :].sum())
        f1[k] = _div(2 * p * r, p + r)
    c = CONGESTED
    return MetricReport(
        accuracy=_div(np.trace(cm), cm.sum()),
        recall=_div(cm[c, c], cm[c, :].sum()),
        precision=_div(cm[c, c], cm[:, c].sum()),
        c_f1=float(f1[c]),
        w_f1=float(sum(w * v for w, v in zip(CLASS_WEIGHTS, f1))),
        confusion=cm,
        per_class_f1=f1,
    )


def evaluate(y_true, y_pred, mask: Optional[np.ndarray] = None) -> MetricReport:
    """Metrics over aligned label arrays.

    ``y_pred`` may be hard labels (same shape as ``y_true``) or class scores
    with a trailing axis of size 3, which are reduced with argmax. Entries
    where ``mask`` is false are skipped.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_pred.ndim == y_true.ndim + 1:
        y_pred = y_pred.argmax(-1)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"prediction shape {y_pred.shape} does not match labels {y_true.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        y_true, y_pred = y_true[mask], y_pred[mask]
    return report_from_confusion(confusion_matrix(y_true, y_pred))
