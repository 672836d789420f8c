"""Convex combination of two probability matrices, tuned against a metric.

The combined prediction is alpha * P1 + (1 - alpha) * P2 with alpha swept over
a fixed grid including both endpoints, so the tuned objective can never fall
below the better single model on the tuning labels. Ties break toward the
smallest alpha. Tune on the validation split and report on test; reusing the
reporting split for tuning leaks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import evaluate
from .errors import DataError, ShapeMismatch

METRICS = ("accuracy", "avg_tpr", "f1", "auc", "neg_avg_fpr")


@dataclass
class CombinationResult:
    alpha: float
    objective_value: float
    metric_name: str
    grid_step: float
    per_alpha_curve: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "objective_value": self.objective_value,
                "metric_name": self.metric_name, "grid_step": self.grid_step,
                "per_alpha_curve": [list(p) for p in self.per_alpha_curve]}


def combine(p1: np.ndarray, p2: np.ndarray, alpha: float) -> np.ndarray:
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ShapeMismatch(f"probability shapes differ: {p1.shape} vs {p2.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * p1 + (1.0 - alpha) * p2


def metric_value(metric: str, probs: np.ndarray, y_true) -> float:
    y_true = np.asarray(y_true, dtype=np.intp)
    n_classes = probs.shape[1]
    if metric in ("accuracy", "avg_tpr", "neg_avg_fpr", "f1"):
        y_pred = evaluate.predict_labels(probs)
        cm = evaluate.confusion(y_true, y_pred, n_classes)
        if metric == "f1":
            return evaluate.f1_binary(cm, positive_class=1)
        rep = evaluate.rates(cm)
        if metric == "accuracy":
            return rep.accuracy
        if metric == "avg_tpr":
            return rep.avg_tpr
        return -rep.avg_fpr
    if metric == "auc":
        if n_classes != 2:
            raise DataError("auc metric needs a binary task")
        _, auc = evaluate.roc_auc(probs[:, 1], y_true)
        return auc
    raise DataError(f"unknown metric {metric!r}; choose from {METRICS}")


def optimize_alpha(p1, p2, y_true, metric: str = "accuracy",
                   grid_step: float = 0.01) -> CombinationResult:
    """Exhaustive grid search over alpha; endpoints always included."""
    if not 0.0 < grid_step <= 1.0:
        raise DataError("grid_step must be in (0, 1]")
    grid = [round(i * grid_step, 12) for i in range(int(np.ceil(1.0 / grid_step)) + 1)]
    grid = [a for a in grid if a < 1.0] + [1.0]

    curve = []
    best_alpha, best_value = None, -np.inf
    for alpha in grid:
        value = metric_value(metric, combine(p1, p2, alpha), y_true)
        curve.append((alpha, float(value)))
        if value > best_value:
            best_alpha, best_value = alpha, float(value)
    return CombinationResult(alpha=best_alpha, objective_value=best_value,
                             metric_name=metric, grid_step=grid_step,
                             per_alpha_curve=curve)


def result_write(result: CombinationResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=1)
        fh.write("\n")


def curve_csv_write(result: CombinationResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", result.metric_name])
        for alpha, value in result.per_alpha_curve:
            writer.writerow([repr(alpha), repr(value)])
