"""Precision / recall / F1 and confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaViolation


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    confusion: np.ndarray  # rows = true, columns = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "per_class": {
                c: {"precision": float(self.precision[k]), "recall": float(self.recall[k]),
                    "f1": float(self.f1[k]), "support": int(self.support[k])}
                for k, c in enumerate(self.classes)
            },
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "micro": {"precision": self.micro_precision, "recall": self.micro_recall, "f1": self.micro_f1},
            "accuracy": self.accuracy,
        }


def _safe_div(num, den):
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def compute_metrics(y_true, y_pred, classes) -> MetricsReport:
    """Per-class and macro/micro scores.

    Macro scores average only over classes that occur in ``y_true``.
    """
    classes = tuple(classes)
    y_true, y_pred = list(y_true), list(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    pos = {c: k for k, c in enumerate(classes)}
    try:
        t = np.array([pos[y] for y in y_true], dtype=np.int64)
        p = np.array([pos[y] for y in y_pred], dtype=np.int64)
    except KeyError as exc:
        raise SchemaViolation(f"label {exc.args[0]!r} is not in class set {classes}") from None

    k = len(classes)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    present = support > 0
    macro = lambda v: float(v[present].mean()) if present.any() else 0.0  # noqa: E731
    total = int(cm.sum())
    micro = float(tp.sum() / total) if total else 0.0
    return MetricsReport(classes, cm, precision, recall, f1, support,
                         macro(precision), macro(recall), macro(f1), micro, micro, micro, micro)
