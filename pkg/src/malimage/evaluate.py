"""Classification metrics and their file formats.

Per-class rates over a confusion matrix with rows = true class:

    tpr_i = counts[i][i] / (samples of class i)
    fpr_i = (predicted-as-i that are not i) / (samples not of class i)

The averages are plain means over classes; classes with zero true samples are
excluded from the tpr mean and recorded in ``skipped_classes`` (a balanced
test set never hits this). Rates are decimals everywhere in files; render as
percent only for display.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (BadMagic, DataError, LabelOutOfRange, NotBinary,
                     ShapeMismatch, SingleClass, TruncatedFile)

MPROB_MAGIC = b"MPRB"


@dataclass
class MetricsReport:
    accuracy: float
    per_class_fpr: list[float]
    per_class_tpr: list[float]
    avg_fpr: float
    avg_tpr: float
    confusion: list[list[int]]
    skipped_classes: list[int] = field(default_factory=list)
    f1: float | None = None
    auc: float | None = None
    roc_points: list[tuple[float, float]] | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_fpr": self.per_class_fpr,
            "per_class_tpr": self.per_class_tpr,
            "avg_fpr": self.avg_fpr,
            "avg_tpr": self.avg_tpr,
            "confusion": self.confusion,
            "skipped_classes": self.skipped_classes,
            "f1": self.f1,
            "auc": self.auc,
            "roc_points": [list(p) for p in self.roc_points]
                          if self.roc_points is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        roc = d.get("roc_points")
        return cls(accuracy=d["accuracy"], per_class_fpr=d["per_class_fpr"],
                   per_class_tpr=d["per_class_tpr"], avg_fpr=d["avg_fpr"],
                   avg_tpr=d["avg_tpr"], confusion=d["confusion"],
                   skipped_classes=d.get("skipped_classes", []),
                   f1=d.get("f1"), auc=d.get("auc"),
                   roc_points=[tuple(p) for p in roc] if roc is not None else None)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax predictions; ties go to the lower class index."""
    return np.argmax(probs, axis=1)


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch("y_true and y_pred differ in length")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise LabelOutOfRange(f"{name} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def rates(cm: np.ndarray) -> MetricsReport:
    """Accuracy plus per-class and average FPR/TPR from a confusion matrix.

    Counts are integers, so every rate is computed as an exact rational and
    rounded to float once -- hand-computed fractions match exactly.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise DataError("confusion matrix is empty")
    n = cm.shape[0]
    row = [int(v) for v in cm.sum(axis=1)]
    col = [int(v) for v in cm.sum(axis=0)]
    diag = [int(cm[i, i]) for i in range(n)]

    tpr, fpr, skipped = [], [], []
    tpr_valid, fpr_valid = [], []
    for i in range(n):
        if row[i] == 0:
            skipped.append(i)
            tpr.append(float("nan"))
        else:
            t = Fraction(diag[i], row[i])
            tpr.append(float(t))
            tpr_valid.append(t)
        negatives = total - row[i]
        if negatives > 0:
            f = Fraction(col[i] - diag[i], negatives)
            fpr.append(float(f))
            fpr_valid.append(f)
        else:
            fpr.append(float("nan"))

    return MetricsReport(
        accuracy=float(Fraction(sum(diag), total)),
        per_class_fpr=fpr,
        per_class_tpr=tpr,
        avg_fpr=float(sum(fpr_valid) / len(fpr_valid)) if fpr_valid else float("nan"),
        avg_tpr=float(sum(tpr_valid) / len(tpr_valid)) if tpr_valid else float("nan"),
        confusion=cm.tolist(),
        skipped_classes=skipped,
    )


def f1_binary(cm: np.ndarray, positive_class: int = 1) -> float:
    """F1 = 2PR / (P + R) for a 2-class confusion matrix; 0 when P + R = 0."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise NotBinary(f"need a 2x2 confusion matrix, got {cm.shape}")
    p = positive_class
    q = 1 - p
    tp = int(cm[p, p])
    fp = int(cm[q, p])
    fn = int(cm[p, q])
    precision = Fraction(tp, tp + fp) if tp + fp > 0 else Fraction(0)
    recall = Fraction(tp, tp + fn) if tp + fn > 0 else Fraction(0)
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def roc_auc(scores, y_true) -> tuple[list[tuple[float, float, float]], float]:
    """ROC by threshold sweep plus trapezoid AUC.

    Returns (points, auc) where points are (threshold, fpr, tpr) from the
    all-negative corner to (1, 1). The trapezoid AUC equals the probability
    that a random positive outscores a random negative, ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.intp)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (y[order] == 1).astype(np.float64)

    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0.0
    i = 0
    while i < len(sorted_scores):
        thresh = sorted_scores[i]
        while i < len(sorted_scores) and sorted_scores[i] == thresh:
            tp += sorted_pos[i]
            fp += 1.0 - sorted_pos[i]
            i += 1
        points.append((float(thresh), fp / n_neg, tp / n_pos))

    auc = 0.0
    for (_, f0, t0), (_, f1_, t1) in zip(points, points[1:]):
        auc += (f1_ - f0) * (t0 + t1) / 2.0
    return points, float(auc)


# --- serialization ------------------------------------------------------------


def report_write(report: MetricsReport, path, fmt: str = "json") -> None:
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "value"])
            writer.writerow(["accuracy", repr(report.accuracy)])
            writer.writerow(["avg_fpr", repr(report.avg_fpr)])
            writer.writerow(["avg_tpr", repr(report.avg_tpr)])
            for i, v in enumerate(report.per_class_fpr):
                writer.writerow([f"fpr_{i}", repr(v)])
            for i, v in enumerate(report.per_class_tpr):
                writer.writerow([f"tpr_{i}", repr(v)])
            if report.f1 is not None:
                writer.writerow(["f1", repr(report.f1)])
            if report.auc is not None:
                writer.writerow(["auc", repr(report.auc)])
    else:
        raise DataError(f"unknown report format {fmt!r}")


def report_read(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        return MetricsReport.from_dict(json.load(fh))


def roc_csv_write(points, path) -> None:
    """Write ROC sweep points as ``threshold,fpr,tpr`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for thresh, fpr, tpr in points:
            writer.writerow([repr(thresh), repr(fpr), repr(tpr)])


def write_probs(path, probs: np.ndarray) -> None:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeMismatch("probability matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(MPROB_MAGIC)
        fh.write(struct.pack("<II", probs.shape[0], probs.shape[1]))
        fh.write(probs.astype("<f4").tobytes())


def read_probs(path) -> np.ndarray:
    """Load a probability matrix; rows are validated as stochastic (f32 storage)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MPROB_MAGIC:
        raise BadMagic(f"{path}: bad magic at offset 0 (want MPRB)")
    if len(blob) < 12:
        raise TruncatedFile(f"{path}: header truncated at offset {len(blob)}")
    n, c = struct.unpack_from("<II", blob, 4)
    need = 12 + 4 * n * c
    if len(blob) < need:
        raise TruncatedFile(f"{path}: data truncated at offset {len(blob)} "
                            f"(need {need} bytes)")
    probs = np.frombuffer(blob, dtype="<f4", count=n * c, offset=12)
    probs = probs.reshape(n, c).astype(np.float64)
    if probs.size:
        if probs.min() < -1e-6 or probs.max() > 1.0 + 1e-6:
            raise DataError(f"{path}: probabilities outside [0, 1]")
        rowsum = probs.sum(axis=1)
        if np.max(np.abs(rowsum - 1.0)) > 1e-4:
            raise DataError(f"{path}: rows are not stochastic")
    return probs
