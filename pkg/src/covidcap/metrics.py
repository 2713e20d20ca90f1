"""Evaluation: ROC AUC, thresholded confusion metrics, infection-size-band
reports, the dual-sampling score fusion and a paired t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import EvalGroup, assign_eval_group

POSITIVE_THRESHOLD = 0.5

# Ensemble weight on the uniform-sampling score: trust it least in the
# extreme-size bands where size-balanced training helps most.
FUSE_EXTREME_LOW = 0.001
FUSE_EXTREME_HIGH = 0.030
FUSE_WEIGHT_EXTREME = 0.35
FUSE_WEIGHT_MIDDLE = 0.96


@dataclass(frozen=True)
class MetricReport:
    """Headline metrics for one score set; sub-metrics that are undefined for
    the data (single-class, empty prediction sets) are None."""

    n: int
    auc: float | None
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    f1: float | None
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "auc": self.auc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
        }


def _check_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError(
            f"scores and labels must be equal-length 1D arrays, got {scores.shape} and {labels.shape}"
        )
    if scores.size == 0:
        raise ValueError("no samples")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(int)


def auc(scores, labels) -> float:
    """Area under the ROC curve via average ranks; ties count half.

    Equals the probability that a random positive outscores a random
    negative.  Raises if only one class is present.
    """
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = stats.rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def confusion_metrics(scores, labels, threshold: float = POSITIVE_THRESHOLD) -> MetricReport:
    """Threshold scores (>= threshold is positive) and report accuracy,
    sensitivity, specificity, F1 and AUC; undefined entries become None."""
    scores, labels = _check_scores_labels(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    tn = int(np.count_nonzero(~pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    n = labels.size
    n_pos, n_neg = tp + fn, tn + fp
    try:
        auc_value: float | None = auc(scores, labels)
    except ValueError:
        auc_value = None
    f1_den = 2 * tp + fp + fn
    return MetricReport(
        n=n,
        auc=auc_value,
        accuracy=(tp + tn) / n,
        sensitivity=tp / n_pos if n_pos else None,
        specificity=tn / n_neg if n_neg else None,
        f1=2 * tp / f1_den if f1_den else None,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def groupwise_report(scores, labels, ratios) -> dict[EvalGroup, MetricReport | None]:
    """Per-infection-size-band metrics; bands with no samples report None."""
    scores, labels = _check_scores_labels(scores, labels)
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != scores.shape:
        raise ValueError(f"ratios shape {ratios.shape} != scores shape {scores.shape}")
    bands = np.array([assign_eval_group(r).value for r in ratios])
    out: dict[EvalGroup, MetricReport | None] = {}
    for group in EvalGroup:
        keep = bands == group.value
        out[group] = confusion_metrics(scores[keep], labels[keep]) if keep.any() else None
    return out


def dual_weight(ratio: float) -> float:
    """Fusion weight on the uniform-sampling score for one scan."""
    if ratio < 0 or not math.isfinite(ratio):
        raise ValueError(f"infection ratio must be finite and >= 0, got {ratio}")
    if ratio < FUSE_EXTREME_LOW or ratio > FUSE_EXTREME_HIGH:
        return FUSE_WEIGHT_EXTREME
    return FUSE_WEIGHT_MIDDLE


def fuse(p_us: float, p_ss: float, weight: float) -> float:
    """Convex combination ``weight * p_us + (1 - weight) * p_ss``."""
    for name, p in (("p_us", p_us), ("p_ss", p_ss)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be a probability in [0, 1], got {p}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    return weight * p_us + (1.0 - weight) * p_ss


def paired_t_test(a, b) -> float:
    """Two-sided p-value for the mean of paired differences being zero.

    Degenerate cases: identical sequences give p = 1; constant nonzero
    differences give p = 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"need equal-length 1D sequences, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 1.0
    sd = d.std(ddof=1)
    if sd == 0:
        return 0.0
    t = d.mean() / (sd / math.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), df=d.size - 1))


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|); two empty masks score 1."""
    mask_a = np.asarray(mask_a) > 0
    mask_b = np.asarray(mask_b) > 0
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(mask_a & mask_b)) / total
