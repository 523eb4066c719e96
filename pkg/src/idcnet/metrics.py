"""Evaluation metrics: confusion counts, balanced accuracy, F1, ROC/AUC.

Balanced accuracy and F1 are the headline numbers because the test split is
heavily imbalanced; plain accuracy would flatter a classifier that ignores
the positive class. The ROC sweep groups tied scores into a single
threshold step, which makes the trapezoidal AUC equal to the Mann-Whitney
concordance statistic with half-weight ties.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    """(false-positive-rate, true-positive-rate) points from (0,0) to (1,1)."""

    points: tuple[tuple[float, float], ...]
    auc: float


def _check_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores shape {scores.shape} and labels shape {labels.shape} "
                         "must be equal 1-d vectors")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions (score >= threshold) against labels."""
    scores, labels = _check_scores_labels(scores, labels)
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """(sensitivity + specificity) / 2; undefined if a class is absent."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise ValueError("balanced accuracy is undefined when a class is absent "
                         f"(tp+fn={cm.tp + cm.fn}, tn+fp={cm.tn + cm.fp})")
    sensitivity = cm.tp / (cm.tp + cm.fn)
    specificity = cm.tn / (cm.tn + cm.fp)
    return (sensitivity + specificity) / 2.0


def f1_score(cm: ConfusionMatrix) -> float:
    """Harmonic mean of precision and recall; 0 when there are no true
    positives (avoids 0/0)."""
    if cm.tp == 0:
        return 0.0
    precision = cm.tp / (cm.tp + cm.fp)
    recall = cm.tp / (cm.tp + cm.fn)
    return 2.0 * precision * recall / (precision + recall)


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over all distinct score thresholds plus trapezoidal AUC."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present, got "
                         f"{n_pos} positive / {n_neg} negative")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # Step only where the score actually drops, so ties collapse into one point.
    distinct = np.flatnonzero(np.diff(sorted_scores)) + 1
    cut_points = np.concatenate((distinct, [labels.size]))
    tp_cum = np.cumsum(sorted_labels)
    fp_cum = np.cumsum(1 - sorted_labels)

    tpr = np.concatenate(([0.0], tp_cum[cut_points - 1] / n_pos))
    fpr = np.concatenate(([0.0], fp_cum[cut_points - 1] / n_neg))
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(points=tuple(zip(fpr.tolist(), tpr.tolist())), auc=auc)


def evaluation_report(scores, labels, threshold: float = 0.5) -> dict:
    """The standard JSON-ready summary for one evaluation run."""
    cm = confusion(scores, labels, threshold)
    curve = roc_auc(scores, labels)
    return {
        "n": cm.total,
        "tp": cm.tp,
        "fp": cm.fp,
        "tn": cm.tn,
        "fn": cm.fn,
        "balanced_accuracy": balanced_accuracy(cm),
        "f1": f1_score(cm),
        "auc": curve.auc,
        "threshold": threshold,
    }


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1) + "\n")


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        writer.writerows(curve.points)
