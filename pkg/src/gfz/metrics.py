"""Evaluation metrics for multi-label classification: per-class average
precision, mAP, precision-recall curves, mean ROC-AUC, and relative mAP.

All metrics live in [0, 1]; the CLI renders percentages. Score ties are
broken by original sample order (stable sort) so results are deterministic
across runs and platforms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class PredictionSet:
    """Post-sigmoid scores and binary labels, both (N, n_classes)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 2:
            raise ValueError(f"prediction set: scores {self.scores.shape} vs labels {self.labels.shape}")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise ValueError("prediction set: scores must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("prediction set: labels must be binary")


def _ranked(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D arrays")
    order = np.argsort(-scores, kind="stable")
    return labels[order].astype(np.int64)


def average_precision(scores, labels) -> float | None:
    """Area under the precision-recall curve by ranked-prefix summation.

    AP = sum_n (R_n - R_{n-1}) * P_n over the list ranked by descending
    score (stable; original order breaks ties), with R_0 = 0. Returns None
    when there is no positive label (class undefined).
    """
    ranked = _ranked(scores, labels)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        return None
    # ordered accumulation keeps the result reproducible term by term
    total = 0.0
    tp = 0
    prev_recall = 0.0
    for n, hit in enumerate(ranked, start=1):
        if hit:
            tp += 1
            recall = tp / n_pos
            total += (recall - prev_recall) * (tp / n)
            prev_recall = recall
    return total


def mean_average_precision(preds: PredictionSet) -> float:
    """Mean of the defined per-class APs; undefined classes are skipped."""
    aps = []
    for c in range(preds.scores.shape[1]):
        ap = average_precision(preds.scores[:, c], preds.labels[:, c])
        if ap is None:
            warnings.warn(f"mAP: class {c} has no positives, skipped", stacklevel=2)
        else:
            aps.append(ap)
    if not aps:
        raise ValueError("mAP: no class has a defined average precision")
    return float(np.mean(aps))


def per_class_ap(preds: PredictionSet) -> list[float | None]:
    return [average_precision(preds.scores[:, c], preds.labels[:, c])
            for c in range(preds.scores.shape[1])]


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) per ranked prefix, anchored at (0, 1)."""
    ranked = _ranked(scores, labels)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise ValueError("pr_curve: no positive labels")
    points = [(0.0, 1.0)]
    tp = 0
    for n, hit in enumerate(ranked, start=1):
        tp += int(hit)
        points.append((tp / n_pos, tp / n))
    return points


def roc_auc(scores, labels) -> float | None:
    """ROC-AUC via the Mann-Whitney rank statistic, ties counted 0.5.

    Returns None when the class lacks a positive or a negative. Midranks
    are half-integers, so the statistic is exact in float64.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n = scores.shape[0]
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mean_roc_auc(preds: PredictionSet) -> float:
    """Mean per-class AUC over classes holding both label values."""
    aucs = []
    for c in range(preds.scores.shape[1]):
        auc = roc_auc(preds.scores[:, c], preds.labels[:, c])
        if auc is None:
            warnings.warn(f"mean AUC: class {c} lacks both label values, skipped", stacklevel=2)
        else:
            aucs.append(auc)
    if not aucs:
        raise ValueError("mean AUC: no class has both label values")
    return float(np.mean(aucs))


def relative_map(map_t: float, map_full: float) -> float:
    """Relative mAP of a strategy against the full fine-tuning baseline."""
    if map_full <= 0:
        raise ValueError(f"relative_map: baseline mAP must be > 0, got {map_full}")
    return (map_t - map_full) / map_full
