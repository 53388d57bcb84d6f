"""Attack type/category identification via nearest-mean cosine matching.

Prototypes are the per-type means of the concatenated per-branch 128-dim
features (unnormalized averaging).  A detected attack is labeled with the
type whose prototype has the highest cosine similarity; ties break toward
the lower type id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ClassifyError(ValueError):
    pass


@dataclass
class TypePrototypes:
    type_ids: list
    vectors: np.ndarray  # L x (T*128)
    category_of: dict  # type id -> category name


def concat_branch_features(model, store, x):
    """(N, T*feature_dim) concatenated branch features."""
    feats = model.branch_features(store, x)  # N, T, D
    return feats.reshape(feats.shape[0], -1)


def build_prototypes(model, store, x, attack_types, category_of):
    """Mean concatenated branch feature per attack type."""
    types = sorted(int(t) for t in np.unique(attack_types))
    missing = sorted(set(category_of) - set(types))
    if missing:
        raise ClassifyError(f"no training attacks for types {missing}")
    feats = concat_branch_features(model, store, x).astype(np.float64)
    vectors = np.stack(
        [feats[np.asarray(attack_types) == t].mean(axis=0) for t in types]
    )
    return TypePrototypes(types, vectors, dict(category_of))


def predict_type(prototypes, features):
    """Nearest-prototype prediction for feature rows.

    Returns (type_ids, categories, similarities) arrays.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    fn = np.linalg.norm(f, axis=1)
    if np.any(fn == 0):
        raise ClassifyError("zero-norm feature vector")
    pn = np.linalg.norm(prototypes.vectors, axis=1)
    if np.any(pn == 0):
        raise ClassifyError("zero-norm prototype")
    sim = (f / fn[:, None]) @ (prototypes.vectors / pn[:, None]).T
    best = np.argmax(sim, axis=1)  # first max -> lowest type id on ties
    type_ids = np.array([prototypes.type_ids[i] for i in best])
    cats = [prototypes.category_of[int(t)] for t in type_ids]
    return type_ids, cats, sim[np.arange(len(f)), best]


def confusion(model, store, prototypes, x, attack_types, detected_mask=None):
    """Row-normalized type and category confusion matrices plus accuracies.

    detected_mask restricts classification to detector-flagged attacks; by
    default every attack is classified (useful for complete matrices).
    """
    attack_types = np.asarray(attack_types)
    if detected_mask is None:
        detected_mask = np.ones(len(attack_types), dtype=bool)
    x = x[detected_mask]
    true_types = attack_types[detected_mask]
    feats = concat_branch_features(model, store, x)
    pred_types, pred_cats, _ = predict_type(prototypes, feats)

    tids = prototypes.type_ids
    t_index = {t: i for i, t in enumerate(tids)}
    L = len(tids)
    type_counts = np.zeros((L, L))
    for tt, pt in zip(true_types, pred_types):
        type_counts[t_index[int(tt)], t_index[int(pt)]] += 1

    cats = sorted(set(prototypes.category_of.values()))
    c_index = {c: i for i, c in enumerate(cats)}
    cat_counts = np.zeros((len(cats), len(cats)))
    for tt, pc in zip(true_types, pred_cats):
        cat_counts[c_index[prototypes.category_of[int(tt)]], c_index[pc]] += 1

    return {
        "type_ids": tids,
        "categories": cats,
        "type_matrix": _row_normalize(type_counts),
        "category_matrix": _row_normalize(cat_counts),
        "type_accuracy": _trace_accuracy(type_counts),
        "category_accuracy": _trace_accuracy(cat_counts),
        "n_classified": int(len(true_types)),
    }


def _row_normalize(counts):
    sums = counts.sum(axis=1, keepdims=True)
    out = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    return out


def _trace_accuracy(counts):
    total = counts.sum()
    return float(np.trace(counts) / total) if total else 0.0
