"""Ranking metrics, routing diagnostics, and the forgetting measure.

AUROC uses the midrank (Mann-Whitney) tie convention: it equals
P(score_pos > score_neg) + 0.5 P(equal). AP is the step-interpolated area
under the precision-recall curve with ties grouped at one threshold.
Degenerate slices (single-class subsets) raise UndefinedMetricError; report
writers turn that into an explicit "undefined" rather than 0 or NaN, so an
empty {routed wrong} slice under perfect routing cannot poison aggregates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """Metric is undefined on this input (e.g. single-class slice)."""


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be equal-length 1-D arrays")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @staticmethod
    def of(scores, labels) -> "ScoredSet":
        return ScoredSet(np.asarray(scores, dtype=np.float64),
                         np.asarray(labels, dtype=np.int64))


@dataclass(frozen=True)
class RoutedRecord:
    """One test image's routing outcome, input to the diagnostics."""
    image_id: str
    true_category: str
    routed_category: str
    image_label: int
    score: float


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.size != y.size or s.size == 0:
        raise ValueError("scores/labels length mismatch or empty")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC undefined: only one class present")
    ranks = _midranks(s)
    rank_pos = ranks[y == 1].sum()
    return (rank_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Step-interpolated AP over descending unique thresholds, ties grouped."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.size != y.size or s.size == 0:
        raise ValueError("scores/labels length mismatch or empty")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP undefined: no positives")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # group ties: keep only the last element of each run of equal scores
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = tp[last].astype(np.float64)
    fp = fp[last].astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float((d_recall * precision).sum())


def pixel_metrics(pairs: Iterable[tuple]) -> tuple[float, float]:
    """(p-AUROC, p-AP) over all test-set pixels pooled into one scored set.

    pairs yields (pixel_map, mask) per image; shapes must match per pair and
    accumulation is float64 in the given (manifest) order.
    """
    score_blocks = []
    label_blocks = []
    for pixel_map, mask in pairs:
        pm = np.asarray(pixel_map, dtype=np.float64)
        mk = mask.data if hasattr(mask, "data") else np.asarray(mask)
        if pm.shape != mk.shape:
            raise ValueError(f"map/mask shape mismatch: {pm.shape} vs {mk.shape}")
        score_blocks.append(pm.reshape(-1))
        label_blocks.append(np.asarray(mk, dtype=np.int64).reshape(-1))
    if not score_blocks:
        raise ValueError("no (map, mask) pairs")
    scores = np.concatenate(score_blocks)
    labels = np.concatenate(label_blocks)
    if labels.sum() == 0:
        raise UndefinedMetricError("pixel metrics undefined: no anomalous pixels")
    return auroc(scores, labels), average_precision(scores, labels)


def routing_accuracy(records: Sequence[RoutedRecord], which: str = "all") -> float:
    """Fraction routed to the true category, optionally sliced by image label."""
    if which == "all":
        subset = records
    elif which == "normal":
        subset = [r for r in records if r.image_label == 0]
    elif which == "anomaly":
        subset = [r for r in records if r.image_label == 1]
    else:
        raise ValueError("slice must be all|normal|anomaly")
    if not subset:
        raise UndefinedMetricError(f"routing accuracy undefined: empty {which!r} slice")
    hits = sum(1 for r in subset if r.routed_category == r.true_category)
    return hits / len(subset)


def conditional_auroc(records: Sequence[RoutedRecord], condition: str) -> float:
    """Image AUROC restricted to correctly / incorrectly routed images."""
    if condition == "routed_correct":
        subset = [r for r in records if r.routed_category == r.true_category]
    elif condition == "routed_wrong":
        subset = [r for r in records if r.routed_category != r.true_category]
    else:
        raise ValueError("condition must be routed_correct|routed_wrong")
    if not subset:
        raise UndefinedMetricError(f"conditional AUROC undefined: empty {condition} subset")
    return auroc([r.score for r in subset], [r.image_label for r in subset])


# ---------------------------------------------------------------------------
# continual evaluation matrix and forgetting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalMatrix:
    """P[i-1, t-1] = performance of category i evaluated after step t (i <= t),
    NaN where undefined (i > t)."""
    T: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.T, self.T):
            raise ValueError("values must be (T, T)")
        for i in range(self.T):
            for t in range(self.T):
                v = self.values[i, t]
                if i > t:
                    if not np.isnan(v):
                        raise ValueError(f"entry ({i+1},{t+1}) must be absent (i > t)")
                elif np.isnan(v) or not (0.0 <= v <= 1.0):
                    raise ValueError(f"entry ({i+1},{t+1}) missing or outside [0,1]")

    def get(self, i: int, t: int) -> float:
        """1-indexed accessor, defined for i <= t."""
        if not (1 <= i <= t <= self.T):
            raise ValueError(f"P_{i}^({t}) undefined")
        return float(self.values[i - 1, t - 1])


def forgetting_measure(matrix: EvalMatrix, i: int) -> float:
    """FM_i = max over t in {i..T-1} of P_i^(t), minus P_i^(T), floored at 0.

    Defined for i in 1..T-1 (the final category has no earlier evaluation).
    Negative raw values (backward transfer) report as 0 so the measure stays
    nonnegative.
    """
    T = matrix.T
    if T < 2:
        raise ValueError("FM requires T >= 2")
    if not (1 <= i <= T - 1):
        raise ValueError("FM_i defined for 1 <= i <= T-1")
    best = max(matrix.get(i, t) for t in range(i, T))
    return max(0.0, best - matrix.get(i, T))


def overall_fm(matrix: EvalMatrix) -> float:
    """Mean of FM_i over i = 1..T-1."""
    T = matrix.T
    if T < 2:
        raise ValueError("FM requires T >= 2")
    return sum(forgetting_measure(matrix, i) for i in range(1, T)) / (T - 1)
