"""Ranking and calibration metrics for binary per-task predictions.

Sums run through ``math.fsum`` over terms that are each a single rounded
division, so results do not depend on summation order. F1 is formed exactly
and rounded once.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("au_pr", "au_roc", "f1", "ece")


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return s, y.astype(np.int64)


def au_pr(scores, labels) -> float | None:
    """Non-interpolated area under the precision-recall curve (None without positives).

    Sweeps the unique scores in descending order and sums precision * recall step.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # end of each tie group
    tp, fp = tp[last], fp[last]
    d_tp = np.diff(np.r_[0, tp])
    terms = [int(d) * int(t) / (int(t + f) * n_pos) for d, t, f in zip(d_tp, tp, fp) if d]
    return math.fsum(terms)


def au_roc(scores, labels) -> float | None:
    """Mann-Whitney statistic with half credit for ties (None for single-class input)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # twice the average ranks are integers, so u2 = 2U is exact
    r2 = np.rint(2 * rankdata(s)).astype(np.int64)
    u2 = int(r2[y == 1].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def _f1(tp: int, fp: int, fn: int) -> Fraction:
    return Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + fp + fn)


def macro_f1(scores, labels, threshold: float = 0.5) -> float:
    """Unweighted mean of the positive- and negative-class F1; an undefined F1 counts as 0."""
    s, y = _check(scores, labels)
    pred = (s >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return float((_f1(tp, fp, fn) + _f1(tn, fn, fp)) / 2)


def bucket_edges(buckets: int = 10) -> np.ndarray:
    """Edges 0.5 + b / (2 * buckets), each the nearest double to its exact value."""
    return np.array([(buckets + b) / (2 * buckets) for b in range(buckets + 1)])


@dataclass
class Bucket:
    lower: float
    upper: float
    count: int
    accuracy: float | None
    confidence: float | None


def confidence_buckets(scores, labels, buckets: int = 10) -> list[Bucket]:
    """Confidence max(p, 1 - p) binned over [0.5, 1]; bins are right-inclusive, the first closed."""
    s, y = _check(scores, labels)
    conf = np.maximum(s, 1.0 - s)
    correct = (s >= 0.5).astype(np.int64) == y
    edges = bucket_edges(buckets)
    idx = np.searchsorted(edges[1:-1], conf, side="left")
    out = []
    for b in range(buckets):
        m = idx == b
        n = int(m.sum())
        acc = int(correct[m].sum()) / n if n else None
        cf = math.fsum(conf[m]) / n if n else None
        out.append(Bucket(float(edges[b]), float(edges[b + 1]), n, acc, cf))
    return out


def ece(scores, labels, buckets: int = 10) -> float:
    """Expected calibration error sum_b (n_b / N) |acc_b - conf_b|; 0 for empty input."""
    s, y = _check(scores, labels)
    if s.size == 0:
        return 0.0
    conf = np.maximum(s, 1.0 - s)
    correct = (s >= 0.5).astype(np.int64) == y
    idx = np.searchsorted(bucket_edges(buckets)[1:-1], conf, side="left")
    terms = []
    for b in range(buckets):
        m = idx == b
        if m.any():
            terms.append(abs(int(correct[m].sum()) - math.fsum(conf[m])) / s.size)
    return math.fsum(terms)


def task_metrics(scores, labels) -> dict:
    return {"au_pr": au_pr(scores, labels), "au_roc": au_roc(scores, labels),
            "f1": macro_f1(scores, labels), "ece": ece(scores, labels)}


def weighted_aggregate(values, positive_counts) -> float | None:
    """Positive-count weighted mean; tasks whose metric is undefined drop out and weights renormalize."""
    counts = [int(c) for c in positive_counts]
    if len(counts) != len(values):
        raise ValueError("one positive count per task is required")
    if any(c < 0 for c in counts):
        raise ValueError("positive counts must be non-negative")
    if sum(counts) == 0:
        raise ValueError("weighted_aggregate: no task has positives")
    pairs = [(c, v) for c, v in zip(counts, values) if v is not None and c > 0]
    total = sum(c for c, _ in pairs)
    if total == 0:
        return None
    return math.fsum(c * v for c, v in pairs) / total


@dataclass
class EvalReport:
    per_task: list[dict]
    positives: list[int]
    aggregates: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, scores, labels) -> "EvalReport":
        """scores, labels: (N, tasks) arrays."""
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels)
        if s.ndim == 1:
            s, y = s[:, None], y[:, None]
        if s.shape != y.shape:
            raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
        per_task = [task_metrics(s[:, t], y[:, t]) for t in range(s.shape[1])]
        positives = [int(v) for v in y.sum(0)]
        agg = {}
        if sum(positives):
            for name in METRIC_NAMES:
                agg[name] = weighted_aggregate([m[name] for m in per_task], positives)
        return cls(per_task, positives, agg)

    def to_dict(self) -> dict:
        return {"per_task": self.per_task, "positives": self.positives,
                "weighted": {f"w_{k}": v for k, v in self.aggregates.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"w_{k}={_fmt(v)}" for k, v in self.aggregates.items()]
        for t, m in enumerate(self.per_task):
            lines.append(f"task{t}.positives={self.positives[t]}")
            lines += [f"task{t}.{k}={_fmt(v)}" for k, v in m.items()]
        return "\n".join(lines) + "\n"

    def selection_metric(self) -> float:
        """Validation AU-PR (weighted for multi-task); -inf when undefined."""
        v = self.aggregates.get("au_pr")
        return -math.inf if v is None else v


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))
