"""Auxiliary task construction: mean attack features, similarity, k-means.

Clustering operates on the per-type mean embedding vectors (L rows), not on
the raw sample embeddings, so exhaustive enumeration stays tractable and is
used as a global optimality oracle for small L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ClusterError(ValueError):
    pass


class DegenerateFeatureError(ClusterError):
    """A mean feature has zero norm; cosine similarity is undefined."""


@dataclass
class MeanFeatureTable:
    type_ids: list  # sorted attack type ids
    means: np.ndarray  # L x D


@dataclass
class Partition:
    """Assignment of attack types to clusters.

    wcss/centroids are present for embedding-driven partitions and None for
    manual ones (semantic or random splits).
    """

    type_ids: list
    assignment: np.ndarray  # cluster index per type, values in [0, n_clusters)
    n_clusters: int
    wcss: float | None = None
    centroids: np.ndarray | None = None

    def clusters(self):
        out = [[] for _ in range(self.n_clusters)]
        for tid, c in zip(self.type_ids, self.assignment):
            out[int(c)].append(int(tid))
        return out

    def cluster_of(self):
        return {int(t): int(c) for t, c in zip(self.type_ids, self.assignment)}

    def restricted_to(self, keep_type_ids):
        """Drop types (e.g. unseen-fold holdouts), keeping cluster indices.

        Raises if a cluster would become empty.
        """
        keep = [i for i, t in enumerate(self.type_ids) if t in set(keep_type_ids)]
        assignment = self.assignment[keep]
        if len(set(assignment.tolist())) != self.n_clusters:
            raise ClusterError("restriction would empty a cluster")
        return Partition(
            [self.type_ids[i] for i in keep], assignment, self.n_clusters
        )

    def to_json(self, type_names=None):
        names = type_names or {}
        return {
            "T": self.n_clusters,
            "wcss": None if self.wcss is None else float(self.wcss),
            "clusters": [
                [names.get(t, str(t)) for t in cluster] for cluster in self.clusters()
            ],
            "cluster_type_ids": self.clusters(),
        }


def mean_features(embeddings, attack_types, expected_types=None):
    """Arithmetic mean embedding per attack type, sorted by type id."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    attack_types = np.asarray(attack_types)
    present = sorted(int(t) for t in np.unique(attack_types))
    if expected_types is not None:
        missing = sorted(set(int(t) for t in expected_types) - set(present))
        if missing:
            raise ClusterError(f"no samples for attack types {missing}")
        present = sorted(int(t) for t in expected_types)
    means = np.stack(
        [embeddings[attack_types == t].mean(axis=0) for t in present]
    )
    return MeanFeatureTable(present, means)


def similarity_matrix(table):
    """Pairwise cosine similarity of the mean features."""
    means = table.means if isinstance(table, MeanFeatureTable) else np.asarray(table)
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0):
        bad = [table.type_ids[i] for i in np.flatnonzero(norms == 0)] if isinstance(
            table, MeanFeatureTable
        ) else list(np.flatnonzero(norms == 0))
        raise DegenerateFeatureError(f"zero-norm mean feature for types {bad}")
    sim = (means / norms[:, None]) @ (means / norms[:, None]).T
    return np.clip(sim, -1.0, 1.0)


def wcss_of(means, assignment, n_clusters):
    total = 0.0
    for c in range(n_clusters):
        pts = means[assignment == c]
        if len(pts):
            mu = pts.mean(axis=0)
            total += float(((pts - mu) ** 2).sum())
    return total


def _sq_dists(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = _sq_dists(x, x[chosen]).min(axis=1)
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
    return x[chosen].copy()


def _lloyd(x, centroids, max_iter=100):
    n, k = len(x), len(centroids)
    assignment = np.full(n, -1)
    for _ in range(max_iter):
        d_all = _sq_dists(x, centroids)
        new_assignment = np.argmin(d_all, axis=1)
        # repair empty clusters by stealing the farthest point from a
        # multi-member cluster
        for c in range(k):
            if (new_assignment == c).any():
                continue
            d = d_all[np.arange(n), new_assignment]
            sizes = np.bincount(new_assignment, minlength=k)
            eligible = sizes[new_assignment] > 1
            if not eligible.any():
                continue
            far = int(np.argmax(np.where(eligible, d, -np.inf)))
            new_assignment[far] = c
            centroids[c] = x[far]
        if (new_assignment == assignment).all():
            break
        assignment = new_assignment
        for c in range(k):
            pts = x[assignment == c]
            if len(pts):
                centroids[c] = pts.mean(axis=0)
    return assignment, centroids


def kmeans_partition(table, n_clusters, restarts=50, seed=0):
    """Best-of-restarts Lloyd's algorithm with distance-weighted seeding."""
    means = table.means
    type_ids = table.type_ids
    L = len(type_ids)
    if not 1 <= n_clusters <= L:
        raise ClusterError(f"need 1 <= T <= {L}, got {n_clusters}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 11, r])
        )
        centroids = _kmeanspp_init(means, n_clusters, rng)
        assignment, centroids = _lloyd(means, centroids)
        w = wcss_of(means, assignment, n_clusters)
        if best is None or w < best[0] - 1e-12:
            best = (w, assignment, centroids)
    w, assignment, centroids = best
    assignment = _canonicalize(assignment, n_clusters)
    centroids = np.stack(
        [means[assignment == c].mean(axis=0) for c in range(n_clusters)]
    )
    return Partition(list(type_ids), assignment, n_clusters, w, centroids)


def _canonicalize(assignment, k):
    """Relabel clusters by order of first appearance."""
    mapping = {}
    out = np.empty_like(assignment)
    for i, c in enumerate(assignment):
        if c not in mapping:
            mapping[c] = len(mapping)
        out[i] = mapping[c]
    if len(mapping) != k:
        raise ClusterError("empty cluster after Lloyd iterations")
    return out


def _rgs(L, T):
    """Restricted growth strings over L items with exactly T blocks."""
    a = np.zeros(L, dtype=np.int64)

    def rec(i, used):
        if L - i < T - used:
            return
        if i == L:
            if used == T:
                yield a.copy()
            return
        for c in range(min(used + 1, T)):
            a[i] = c
            yield from rec(i + 1, max(used, c + 1))

    yield from rec(1, 1)  # a[0] = 0 fixed


def brute_force_partition(table, n_clusters, max_points=10):
    """Globally WCSS-minimal partition by exhaustive enumeration."""
    means = table.means
    type_ids = table.type_ids
    L = len(type_ids)
    if not 1 <= n_clusters <= L:
        raise ClusterError(f"need 1 <= T <= {L}, got {n_clusters}")
    if L > max_points:
        raise ClusterError(
            f"enumeration budget exceeded: {L} points > {max_points}"
        )
    best = None
    for assignment in _rgs(L, n_clusters):
        w = wcss_of(means, assignment, n_clusters)
        if best is None or w < best[0] - 1e-12:
            best = (w, assignment)
    w, assignment = best
    centroids = np.stack(
        [means[assignment == c].mean(axis=0) for c in range(n_clusters)]
    )
    return Partition(list(type_ids), assignment, n_clusters, w, centroids)


def semantic_partition(types):
    """Cluster attack types by their semantic category."""
    cats = sorted(set(t.category for t in types))
    type_ids = [t.type_id for t in types]
    assignment = np.array([cats.index(t.category) for t in types])
    return Partition(type_ids, assignment, len(cats))


def random_partition(type_ids, n_clusters, seed):
    """Uniform random split into n_clusters non-empty groups."""
    L = len(type_ids)
    if n_clusters > L:
        raise ClusterError(f"need T <= {L}, got {n_clusters}")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 13]))
    while True:
        assignment = rng.integers(0, n_clusters, size=L)
        if len(set(assignment.tolist())) == n_clusters:
            return Partition(list(type_ids), _canonicalize(assignment, n_clusters),
                             n_clusters)


def manual_partition(type_ids, clusters):
    """Partition from explicit clusters (list of lists of type ids)."""
    cluster_of = {}
    for c, group in enumerate(clusters):
        for t in group:
            if t in cluster_of:
                raise ClusterError(f"type {t} appears in two clusters")
            cluster_of[t] = c
    missing = [t for t in type_ids if t not in cluster_of]
    if missing:
        raise ClusterError(f"types missing from manual partition: {missing}")
    assignment = np.array([cluster_of[t] for t in type_ids])
    return Partition(list(type_ids), assignment, len(clusters))
