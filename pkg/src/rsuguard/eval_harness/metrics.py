"""Detection and localization metrics for one trip."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int
    latency: int

    @property
    def n_spoofed(self) -> int:
        return self.tp + self.fn


@dataclass(frozen=True)
class TripMetrics:
    f1: float
    precision: float
    recall: float
    detection_latency: float
    rmse: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_confusion(verdicts: Sequence[int], spoofed: Sequence[bool]) -> Confusion:
    """Per-epoch comparison of verdicts (+1 attack / -1 benign) with ground truth.

    Latency counts spoofed epochs that were missed before the first true positive;
    it equals the number of spoofed epochs when the attack is never flagged.
    """
    if len(verdicts) != len(spoofed):
        raise ValueError("verdicts and labels must have equal length")
    if not len(verdicts):
        raise ValueError("empty epoch log")
    v = np.asarray(verdicts) == 1
    s = np.asarray(spoofed, dtype=bool)
    tp = int(np.sum(v & s))
    fp = int(np.sum(v & ~s))
    fn = int(np.sum(~v & s))
    tn = int(np.sum(~v & ~s))
    hits = np.nonzero(v[s])[0]
    latency = int(hits[0]) if hits.size else int(s.sum())
    return Confusion(tp, fp, fn, tn, latency)


def confusion_from_log(records, detector: str) -> Confusion:
    return compute_confusion([r.verdict(detector) for r in records], [r.spoofed for r in records])


def precision_recall(c: Confusion) -> tuple[float, float]:
    """Zero-division conventions keep benign-only trips from dragging means down."""
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 1.0 if c.n_spoofed == 0 else 0.0
    recall = c.tp / c.n_spoofed if c.n_spoofed else 1.0
    return precision, recall


def compute_f1(precision: float, recall: float) -> float:
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ValueError("precision and recall must lie in [0, 1]")
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_rmse(estimates, truth) -> float:
    """Root of the mean squared Euclidean error over aligned position sequences."""
    est = np.asarray(estimates, dtype=float).reshape(-1, 2)
    tru = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(est) != len(tru):
        raise ValueError(f"length mismatch: {len(est)} estimates vs {len(tru)} truth samples")
    if len(est) == 0:
        raise ValueError("need at least one sample")
    d = est - tru
    return math.sqrt(float(np.mean(np.sum(d * d, axis=1))))


def trip_metrics(c: Confusion, rmse: float) -> TripMetrics:
    p, r = precision_recall(c)
    return TripMetrics(compute_f1(p, r), p, r, float(c.latency), rmse)
