"""Score-level fusion of multiple detectors.

Three families of baselines: five parallel fusion rules over per-detector
scores, a sequential cascade with per-stage false-detection budgets, and a
small logistic gradient-boosted tree ensemble fitted on score vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import sigmoid

FUSION_RULES = ("min", "median", "mean", "max", "sum")


class FusionError(ValueError):
    pass


def fuse_scores(rule, score_matrix):
    """Apply one fusion rule to an (N, k) matrix of detector scores.

    The sum rule is renormalized by k so every rule stays in (0, 1); use
    raw_sum separately if the unnormalized value is wanted.
    """
    s = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    if s.shape[1] < 2:
        raise FusionError("need scores from at least 2 detectors")
    if not np.all(np.isfinite(s)):
        raise FusionError("non-finite detector score")
    if rule == "min":
        return s.min(axis=1)
    if rule == "median":
        return np.median(s, axis=1)
    if rule == "mean":
        return s.mean(axis=1)
    if rule == "max":
        return s.max(axis=1)
    if rule == "sum":
        return s.sum(axis=1) / s.shape[1]
    raise FusionError(f"unknown fusion rule {rule!r}")


def raw_sum(score_matrix):
    return np.asarray(score_matrix, dtype=np.float64).sum(axis=1)


# ---------------------------------------------------------------------------
# sequential cascade


def calibrate_cascade(val_bona_scores, budgets):
    """Per-stage thresholds from sequential false-detection budgets.

    Stage i's threshold flags ~round(budget_i * n_surviving) of the validation
    bona fides that earlier stages passed through; later stages are calibrated
    on the survivors so the stage budgets add up.
    """
    n_stages = len(budgets)
    if len(val_bona_scores) != n_stages:
        raise FusionError("one score column per stage required")
    surviving = np.ones(len(val_bona_scores[0]), dtype=bool)
    thresholds = []
    for scores, budget in zip(val_bona_scores, budgets):
        s = np.sort(np.asarray(scores, dtype=np.float64)[surviving])[::-1]
        k = int(round(budget * len(s)))
        if k <= 0:
            thresholds.append(np.inf)
        else:
            hi = s[k - 1]
            lo = s[k] if k < len(s) else hi - 1.0
            thresholds.append((hi + lo) / 2.0 if lo < hi else hi)
        flagged = np.asarray(scores) >= thresholds[-1]
        surviving &= ~flagged
    return thresholds


def cascade(stage_scores, thresholds):
    """Sequential decisions: first stage whose score clears its threshold.

    stage_scores is a list of per-stage score arrays over the same samples.
    Returns (decisions, stage_index) where stage_index is the flagging stage
    or -1 for samples passed through (bona fide), and stages after the first
    flag are never consulted for a sample.
    """
    if len(stage_scores) != len(thresholds):
        raise FusionError("one threshold per stage required")
    n = len(stage_scores[0])
    decisions = np.zeros(n, dtype=np.int8)
    stage_idx = np.full(n, -1, dtype=np.int64)
    undecided = np.arange(n)
    for i, (scores, tau) in enumerate(zip(stage_scores, thresholds)):
        if len(undecided) == 0:
            break
        flagged = np.asarray(scores)[undecided] >= tau
        hit = undecided[flagged]
        decisions[hit] = 1
        stage_idx[hit] = i
        undecided = undecided[~flagged]
    return decisions, stage_idx


# ---------------------------------------------------------------------------
# gradient boosted trees (logistic loss, depth-limited regression trees)


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    def predict(self, x):
        if self.feature < 0:
            return np.full(len(x), self.value)
        go_left = x[:, self.feature] <= self.threshold
        out = np.empty(len(x))
        out[go_left] = self.left.predict(x[go_left])
        out[~go_left] = self.right.predict(x[~go_left])
        return out

    def to_json(self):
        if self.feature < 0:
            return {"value": float(self.value)}
        return {
            "feature": int(self.feature),
            "threshold": float(self.threshold),
            "left": self.left.to_json(),
            "right": self.right.to_json(),
        }

    @staticmethod
    def from_json(d):
        if "value" in d:
            return TreeNode(value=d["value"])
        return TreeNode(
            feature=d["feature"],
            threshold=d["threshold"],
            left=TreeNode.from_json(d["left"]),
            right=TreeNode.from_json(d["right"]),
        )


@dataclass
class StumpEnsemble:
    init_logodds: float
    shrinkage: float
    trees: list

    def decision(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        f = np.full(len(x), self.init_logodds)
        for tree in self.trees:
            f += self.shrinkage * tree.predict(x)
        return f

    def predict_proba(self, x):
        return sigmoid(self.decision(x))

    def to_json(self):
        return {
            "init_logodds": float(self.init_logodds),
            "shrinkage": float(self.shrinkage),
            "trees": [t.to_json() for t in self.trees],
        }

    @staticmethod
    def from_json(d):
        return StumpEnsemble(
            d["init_logodds"], d["shrinkage"],
            [TreeNode.from_json(t) for t in d["trees"]],
        )


def _best_split(x, residual, min_leaf=1):
    """Exact variance-reduction split scan; deterministic tie-breaking.

    Candidate thresholds are midpoints of adjacent unique feature values, so
    splits are invariant to duplicating every training row.
    """
    n, k = x.shape
    best = None  # (sse, feature, threshold)
    total_sum = residual.sum()
    for j in range(k):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        rs = residual[order]
        csum = np.cumsum(rs)
        boundary = np.flatnonzero(xs[:-1] < xs[1:])  # split after these rows
        for b in boundary:
            nl = b + 1
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl, sr = csum[b], total_sum - csum[b]
            # SSE reduction is equivalent to maximizing sum-of-squared means
            score = sl * sl / nl + sr * sr / nr
            if best is None or score > best[0] + 1e-12:
                threshold = (xs[b] + xs[b + 1]) / 2.0
                best = (score, j, threshold)
    return best


def _fit_tree(x, grad, hess, depth):
    node = TreeNode()
    # Newton leaf value for logistic loss
    node.value = float(grad.sum() / max(hess.sum(), 1e-12))
    if depth == 0 or len(x) < 2:
        return node
    split = _best_split(x, grad)
    if split is None:
        return node
    _, j, tau = split
    node.feature = j
    node.threshold = tau
    mask = x[:, j] <= tau
    node.left = _fit_tree(x[mask], grad[mask], hess[mask], depth - 1)
    node.right = _fit_tree(x[~mask], grad[~mask], hess[~mask], depth - 1)
    return node


def fit_gbdt(score_vectors, labels, n_trees=100, depth=3, shrinkage=0.1):
    """Logistic-loss gradient boosting over detector score vectors."""
    x = np.atleast_2d(np.asarray(score_vectors, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    if not ((y == 0).any() and (y == 1).any()):
        raise FusionError("need both classes to fit the fusion model")
    p = y.mean()
    f0 = float(np.log(p / (1.0 - p)))
    ens = StumpEnsemble(f0, shrinkage, [])
    f = np.full(len(y), f0)
    for _ in range(n_trees):
        prob = sigmoid(f)
        grad = y - prob
        hess = prob * (1.0 - prob)
        tree = _fit_tree(x, grad, hess, depth)
        ens.trees.append(tree)
        f += shrinkage * tree.predict(x)
    return ens
