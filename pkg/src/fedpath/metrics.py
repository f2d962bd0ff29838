"""Confusion matrix and grading metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imaging import GRADES, MAGNIFICATIONS

N_CLASSES = 3


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true grade, cols = predicted grade

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tolist(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion(true_labels: Sequence[int], pred_labels: Sequence[int], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError("true and predicted label lists differ in length")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class GradeScore:
    precision: float
    recall: float
    f1: float
    support: int
    undefined: list = field(default_factory=list)


@dataclass
class MetricsReport:
    accuracy: float
    per_grade: list
    macro_f1: float
    weighted_f1: float
    per_magnification_accuracy: dict
    confusion: ConfusionMatrix
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_grade": [
                {"grade": GRADES[i], "precision": g.precision, "recall": g.recall, "f1": g.f1,
                 "support": g.support, "undefined": list(g.undefined)}
                for i, g in enumerate(self.per_grade)
            ],
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "per_magnification_accuracy": dict(self.per_magnification_accuracy),
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        grades = [GradeScore(g["precision"], g["recall"], g["f1"], g["support"], list(g.get("undefined", [])))
                  for g in d["per_grade"]]
        return cls(d["accuracy"], grades, d["macro_f1"], d["weighted_f1"],
                   dict(d["per_magnification_accuracy"]),
                   ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64)), d.get("n_samples", 0))


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def grade_metrics(cm: ConfusionMatrix):
    """Return ``(per_grade, macro_f1, weighted_f1, accuracy)``.

    Empty denominators give 0.0 and are listed in ``GradeScore.undefined``.
    """
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise ValueError("cannot compute metrics on an empty confusion matrix")
    per_grade = []
    for g in range(c.shape[0]):
        tp = c[g, g]
        prec, u_p = _ratio(tp, c[:, g].sum())
        rec, u_r = _ratio(tp, c[g, :].sum())
        f1, u_f = _ratio(2 * prec * rec, prec + rec)
        undefined = [n for n, u in (("precision", u_p), ("recall", u_r), ("f1", u_f)) if u]
        per_grade.append(GradeScore(float(prec), float(rec), float(f1), int(c[g, :].sum()), undefined))
    f1s = np.array([g.f1 for g in per_grade])
    support = c.sum(axis=1)
    macro = float(f1s.mean())
    weighted = float(np.dot(support, f1s) / total)
    accuracy = float(np.trace(c) / total)
    return per_grade, macro, weighted, accuracy


def magnification_accuracy(true_labels, pred_labels, magnifications) -> dict:
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    mags = list(magnifications)
    if len(mags) != t.size or t.size != p.size:
        raise ValueError("labels, predictions and magnification tags differ in length")
    for m in mags:
        if m not in MAGNIFICATIONS:
            raise ValueError(f"unknown magnification tag {m!r}")
    out = {}
    mag_arr = np.asarray(mags, dtype=object)
    for level in MAGNIFICATIONS:
        sel = mag_arr == level
        if sel.any():
            out[level] = float(np.mean(t[sel] == p[sel]))
    return out


def evaluate_predictions(true_labels, pred_labels, magnifications) -> MetricsReport:
    cm = confusion(true_labels, pred_labels)
    per_grade, macro, weighted, acc = grade_metrics(cm)
    return MetricsReport(acc, per_grade, macro, weighted,
                         magnification_accuracy(true_labels, pred_labels, magnifications),
                         cm, cm.total)
