"""ROC curve, trapezoidal AUC and thresholded binary metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]  # score at which each point after (0, 0) is reached

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


@dataclass(frozen=True)
class BinaryMetrics:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision_undefined: bool = False
    recall_undefined: bool = False


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise UsageError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise UsageError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Sweep thresholds over the distinct scores, highest first; tied scores move together."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UsageError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    fpr = [0.0] + [fps[i] / n_neg for i in ends]
    tpr = [0.0] + [tps[i] / n_pos for i in ends]
    return RocCurve(tuple(float(v) for v in fpr), tuple(float(v) for v in tpr), tuple(float(s[i]) for i in ends))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve along the FPR axis."""
    area = 0.0
    for i in range(1, len(curve.fpr)):
        area += (curve.fpr[i] - curve.fpr[i - 1]) * (curve.tpr[i] + curve.tpr[i - 1]) / 2.0
    return area


def binary_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> BinaryMetrics:
    """Predict positive when ``score >= threshold``.

    Precision (recall) is reported as 0 with its ``*_undefined`` flag set
    when there are no positive predictions (no positive labels).
    """
    s, y = _validate(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    total = tp + fp + tn + fn
    return BinaryMetrics(
        accuracy=(tp + tn) / total if total else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        precision_undefined=tp + fp == 0,
        recall_undefined=tp + fn == 0,
    )


def report(auc_value: float, m: BinaryMetrics) -> dict:
    return {
        "auc": auc_value,
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "tp": m.tp,
        "fp": m.fp,
        "tn": m.tn,
        "fn": m.fn,
    }


def write_report(path, auc_value: float, m: BinaryMetrics) -> None:
    Path(path).write_text(json.dumps(report(auc_value, m), indent=2) + "\n")


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for f, t in curve.points:
            w.writerow([repr(f), repr(t)])
