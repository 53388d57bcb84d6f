"""Biometric evaluation: ROC, TDR at a fixed FDR budget, balanced accuracy.

Scores are oriented 0 = bona fide, 1 = attack; a sample is flagged as an
attack when score >= threshold.  Operating thresholds are always chosen from
the observed score values (plus an above-max sentinel), which makes every
metric here an exact match for a brute-force sweep over candidate thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    """Metric preconditions violated (e.g. single-class input)."""


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    bona = scores[labels == 0]
    attacks = scores[labels == 1]
    if len(bona) == 0 or len(attacks) == 0:
        raise MetricError("need both bona fide and attack samples")
    return bona, attacks


@dataclass
class RocCurve:
    thresholds: np.ndarray  # ascending unique score values + inf sentinel
    fdr: np.ndarray
    tdr: np.ndarray
    n_bona_fide: int
    n_attack: int

    def at(self, threshold):
        """(fdr, tdr) for an arbitrary operating threshold."""
        i = np.searchsorted(self.thresholds, threshold)
        if i == len(self.thresholds):
            return 0.0, 0.0
        if self.thresholds[i] == threshold:
            return float(self.fdr[i]), float(self.tdr[i])
        # between observed values: counts equal those at the next value up
        return float(self.fdr[i]), float(self.tdr[i])


def roc_curve(scores, labels):
    bona, attacks = _split_classes(scores, labels)
    values = np.unique(np.concatenate([bona, attacks]))
    thresholds = np.append(values, np.inf)
    bs = np.sort(bona)
    as_ = np.sort(attacks)
    fdr = (len(bs) - np.searchsorted(bs, thresholds, side="left")) / len(bs)
    tdr = (len(as_) - np.searchsorted(as_, thresholds, side="left")) / len(as_)
    return RocCurve(thresholds, fdr, tdr, len(bs), len(as_))


def tdr_at_fdr(scores, labels, fdr_target):
    """TDR at the loosest threshold whose bona fide flag rate fits the budget.

    The threshold is the smallest observed score value (or +inf if none
    qualifies) such that the fraction of bona fides scoring >= it is at most
    fdr_target.  Returns (tdr, threshold).
    """
    if not 0.0 < fdr_target < 1.0:
        raise MetricError(f"fdr_target must be in (0, 1), got {fdr_target}")
    bona, attacks = _split_classes(scores, labels)
    candidates = np.unique(np.concatenate([bona, attacks]))
    bs = np.sort(bona)
    count_ge = len(bs) - np.searchsorted(bs, candidates, side="left")
    feasible = count_ge / len(bs) <= fdr_target
    if feasible.any():
        threshold = float(candidates[int(np.argmax(feasible))])
    else:
        threshold = np.inf
    tdr = float(np.mean(attacks >= threshold))
    return tdr, threshold


def pick_threshold_balanced(scores, labels):
    """Threshold maximizing balanced accuracy; ties go to the smallest value.

    Returns (threshold, balanced_accuracy) over the given scores.
    """
    bona, attacks = _split_classes(scores, labels)
    candidates = np.append(np.unique(np.concatenate([bona, attacks])), np.inf)
    bs = np.sort(bona)
    as_ = np.sort(attacks)
    fdr = (len(bs) - np.searchsorted(bs, candidates, side="left")) / len(bs)
    tdr = (len(as_) - np.searchsorted(as_, candidates, side="left")) / len(as_)
    bacc = 0.5 * ((1.0 - fdr) + tdr)
    i = int(np.argmax(bacc))
    return float(candidates[i]), float(bacc[i])


def balanced_accuracy(scores, labels, threshold):
    bona, attacks = _split_classes(scores, labels)
    return float(0.5 * (np.mean(bona < threshold) + np.mean(attacks >= threshold)))


def accuracy(scores, labels, threshold_policy):
    """Balanced accuracy under an explicit thresholding policy.

    threshold_policy is either ("fixed", value) or
    ("balanced_val", val_scores, val_labels): pick the threshold maximizing
    balanced accuracy on the validation scores, then apply it here.
    Returns (accuracy, threshold, policy_name).
    """
    kind = threshold_policy[0]
    if kind == "fixed":
        threshold = float(threshold_policy[1])
    elif kind == "balanced_val":
        threshold, _ = pick_threshold_balanced(threshold_policy[1], threshold_policy[2])
    else:
        raise MetricError(f"unknown threshold policy {kind!r}")
    return balanced_accuracy(scores, labels, threshold), threshold, kind


def breakdown(scores, labels, attack_types, category_of, fdr_target):
    """Per-type and per-category TDR at one global operating threshold.

    The threshold comes from the overall bona fide population at fdr_target;
    group TDRs are fractions of each group's attacks at that same threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    attack_types = np.asarray(attack_types)
    overall_tdr, threshold = tdr_at_fdr(scores, labels, fdr_target)
    atk = labels == 1
    present = sorted(int(t) for t in np.unique(attack_types[atk]))
    unknown = [t for t in present if t not in category_of]
    if unknown:
        raise MetricError(f"attack types missing from category map: {unknown}")
    per_type = {}
    for t in present:
        s = scores[atk & (attack_types == t)]
        per_type[t] = {"tdr": float(np.mean(s >= threshold)), "count": int(len(s))}
    per_category = {}
    for cat in sorted(set(category_of[t] for t in present)):
        ts = [t for t in present if category_of[t] == cat]
        s = scores[atk & np.isin(attack_types, ts)]
        per_category[cat] = {"tdr": float(np.mean(s >= threshold)), "count": int(len(s))}
    return {
        "fdr_target": fdr_target,
        "threshold": threshold,
        "overall_tdr": overall_tdr,
        "per_type": per_type,
        "per_category": per_category,
    }
