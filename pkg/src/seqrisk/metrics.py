"""Ranking metrics used for evaluation: AUC and the KS statistic.

AUC is the Mann-Whitney probability that a random positive outscores a random
negative, ties counting one half, computed from average ranks in O(n log n).
KS is the maximum over score thresholds of |TPR - FPR|, with equal scores
moving together.
"""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores/labels shape mismatch: {scores.shape} vs {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise MetricError("non-finite score")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos + n_neg != labels.size:
        raise MetricError("labels must be 0 or 1")
    return scores, labels, n_pos, n_neg


def auc(scores, labels):
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined for single-class input")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average rank over the tie group, 1-based
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def ks(scores, labels):
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("KS undefined for single-class input")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # evaluate only after the last element of each tie group
    last_of_group = np.ones(scores.size, dtype=bool)
    last_of_group[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    tpr = tp[last_of_group] / n_pos
    fpr = fp[last_of_group] / n_neg
    return float(np.max(np.abs(tpr - fpr)))


def roc_points(scores, labels):
    """(fpr, tpr) arrays over the distinct-score thresholds, for reporting."""
    scores, labels, n_pos, n_neg = _validate(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC undefined for single-class input")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    last_of_group = np.ones(scores.size, dtype=bool)
    last_of_group[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    fpr = np.concatenate([[0.0], fp[last_of_group] / n_neg])
    tpr = np.concatenate([[0.0], tp[last_of_group] / n_pos])
    return fpr, tpr
