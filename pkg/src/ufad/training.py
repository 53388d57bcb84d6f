"""Training loops: baseline detector, branched composite loss, relabel variant.

All batch sampling is balanced 50/50 between bona fides and attacks, with
attack types drawn uniformly (so rare types are not under-sampled), plus
random horizontal flips.  Every step draws from its own seeded stream, so a
run is fully determined by (data, seed, hyperparameters).

The composite trainer applies the gradient-routing contract: the shared loss
on the final decision score backpropagates through the whole network, while
each branch's auxiliary loss updates only that branch's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .models import BranchedNet, JointNet, NetConfig

_STEP_NS = 7  # seed-stream namespace for per-step batch sampling


class DatasetError(ValueError):
    """Training split lacks a class or a required attack type."""


class RoutingError(ValueError):
    """A branch batch contains an attack type outside the branch's cluster."""


@dataclass
class Hyper:
    lr: float = 1e-3
    batch: int = 180
    branch_batch: int = 60
    iters: int = 2000
    flip_prob: float = 0.5
    seed: int = 0


@dataclass
class LossLog:
    """Per-step loss values; column 0 is the shared/main loss."""

    columns: list
    rows: list = field(default_factory=list)

    def append(self, step, values):
        self.rows.append((step, *values))

    def column(self, name):
        j = self.columns.index(name)
        return np.array([r[1 + j] for r in self.rows])

    def smoothed(self, name, window=100):
        col = self.column(name)
        kern = np.ones(min(window, len(col))) / min(window, len(col))
        return np.convolve(col, kern, mode="valid")


class BatchSampler:
    """Balanced batches from one split's arrays."""

    def __init__(self, x, labels, attack_types, allowed_types):
        self.x = x
        self.bona = np.flatnonzero(labels == 0)
        self.pools = {t: np.flatnonzero(attack_types == t) for t in allowed_types}
        self.types = list(allowed_types)
        if len(self.bona) == 0:
            raise DatasetError("no bona fide samples in split")
        empty = [t for t in self.types if len(self.pools[t]) == 0]
        if empty:
            raise DatasetError(f"no training samples for attack types {empty}")

    def sample(self, rng, n, flip_prob=0.5, label_of_type=None):
        """Half bona fides (label 0), half attacks uniform over types.

        Returns (x, labels, types) where types is -1 for the bona fide half.
        label_of_type lets the relabel variant mark out-of-cluster attacks as
        bona fide; default labels every attack 1.
        """
        nb = n // 2
        na = n - nb
        bi = self.bona[rng.integers(0, len(self.bona), size=nb)]
        slots = rng.integers(0, len(self.types), size=na)
        u = rng.random(na)
        ai = np.empty(na, dtype=np.int64)
        tys = np.empty(na, dtype=np.int64)
        for j in range(na):
            t = self.types[slots[j]]
            pool = self.pools[t]
            ai[j] = pool[int(u[j] * len(pool))]
            tys[j] = t
        xb = np.concatenate([self.x[bi], self.x[ai]], axis=0).copy()
        if label_of_type is None:
            ya = np.ones(na)
        else:
            ya = np.array([label_of_type(t) for t in tys], dtype=np.float64)
        yb = np.concatenate([np.zeros(nb), ya])
        if flip_prob > 0:
            flip = rng.random(n) < flip_prob
            xb[flip] = xb[flip, :, ::-1, :]
        types = np.concatenate([np.full(nb, -1, dtype=np.int64), tys])
        return xb, yb, types


def _step_rng(seed, step, stream):
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, _STEP_NS, step, stream])
    )


def _check_classes(labels):
    if not ((labels == 0).any() and (labels == 1).any()):
        raise DatasetError("training split must contain both classes")


def train_joint(split, types, hyper, cfg=None, store=None, callback=None):
    """Train the single-trunk baseline; returns (model, store, loss_log)."""
    _check_classes(split.labels)
    cfg = cfg or NetConfig(image_size=split.x.shape[1], channels=split.x.shape[3])
    model = JointNet(cfg)
    if store is None:
        store = model.init_params(hyper.seed)
    sampler = BatchSampler(split.x, split.labels, split.attack_types, types)
    log = LossLog(columns=["loss"])
    for step in range(1, hyper.iters + 1):
        rng = _step_rng(hyper.seed, step, 0)
        xb, yb, _ = sampler.sample(rng, hyper.batch, flip_prob=hyper.flip_prob)
        loss, grads = model.loss_and_grads(store, xb, yb)
        nn.adam_step(store, grads, hyper.lr, step)
        log.append(step, [loss])
        if callback:
            callback(step, [loss])
    return model, store, log


def composite_step(model, store, shared_batch, branch_batches, lr, step,
                   shared_weight=1.0, aux_weights=None):
    """One fused optimizer step of the composite loss with gradient routing.

    The shared loss flows everywhere; branch t's auxiliary loss contributes
    gradients to branch t only (never to the trunk, other branches, or the
    decision layer).  Returns the per-term losses [shared, aux_1..aux_T].
    """
    if aux_weights is None:
        aux_weights = [1.0] * model.n_branches
    losses, grads = composite_gradients(
        model, store, shared_batch, branch_batches, shared_weight, aux_weights
    )
    nn.adam_step(store, grads, lr, step)
    return losses


def composite_gradients(model, store, shared_batch, branch_batches,
                        shared_weight=1.0, aux_weights=None):
    """Routed gradients of the composite loss; see composite_step."""
    if aux_weights is None:
        aux_weights = [1.0] * model.n_branches
    grads = {name: np.zeros(shape, dtype=store[name].dtype)
             for name, shape in model.param_shapes().items()}
    losses = []
    if shared_weight != 0.0:
        xs, ys = shared_batch
        sgrads = {}
        loss_shared = model.shared_loss_and_grads(store, xs, ys, sgrads)
        for name, g in sgrads.items():
            grads[name] += shared_weight * g
    else:
        loss_shared = 0.0
    losses.append(loss_shared)
    if branch_batches and all(w == 1.0 for w in aux_weights):
        # fast path: one fused trunk pass for all branch batches
        bgrads = {}
        aux_losses = model.all_branch_losses_and_grads(
            store, list(branch_batches), bgrads, through_trunk=False
        )
        for name, g in bgrads.items():
            grads[name] += g
        losses.extend(aux_losses)
        return losses, grads
    for t, (xb, yb) in enumerate(branch_batches):
        if aux_weights[t] == 0.0:
            losses.append(0.0)
            continue
        bgrads = {}
        loss_t = model.branch_loss_and_grads(
            store, t, xb, yb, bgrads, through_trunk=False
        )
        for name, g in bgrads.items():
            grads[name] += aux_weights[t] * g
        losses.append(loss_t)
    return losses, grads


def aux_only_gradients(model, store, branch_batches):
    """Gradients of the summed auxiliary losses alone (routing contract)."""
    losses, grads = composite_gradients(
        model, store, (None, None), branch_batches, shared_weight=0.0
    )
    return losses[1:], grads


def validate_branch_batch(batch_types, cluster, branch_index):
    """Raise RoutingError if an attack type falls outside the cluster."""
    present = set(int(t) for t in batch_types if t >= 0)
    bad = sorted(present - set(cluster))
    if bad:
        raise RoutingError(
            f"branch {branch_index} batch contains out-of-cluster attack "
            f"types {bad}"
        )


def _branch_samplers(split, partition):
    samplers = []
    for cluster in partition.clusters():
        if not cluster:
            raise DatasetError("empty cluster in partition")
        samplers.append(
            BatchSampler(split.x, split.labels, split.attack_types, cluster)
        )
    return samplers


def train_branched(split, partition, hyper, shared_depth=2, cfg=None, store=None,
                   callback=None):
    """Train the branched detector with the routed composite loss.

    Returns (model, store, loss_log); loss_log columns are
    [shared, aux_0, ..., aux_{T-1}].
    """
    _check_classes(split.labels)
    cfg = cfg or NetConfig(image_size=split.x.shape[1], channels=split.x.shape[3])
    T = partition.n_clusters
    model = BranchedNet(cfg, n_branches=T, shared_depth=shared_depth)
    if store is None:
        store = model.init_params(hyper.seed)
    all_types = [t for cluster in partition.clusters() for t in cluster]
    shared_sampler = BatchSampler(split.x, split.labels, split.attack_types, all_types)
    branch_samplers = _branch_samplers(split, partition)
    clusters = partition.clusters()
    log = LossLog(columns=["shared"] + [f"aux_{t}" for t in range(T)])
    for step in range(1, hyper.iters + 1):
        branch_batches = []
        for t in range(T):
            rng = _step_rng(hyper.seed, step, t)
            xb, yb, tys = branch_samplers[t].sample(
                rng, hyper.branch_batch, hyper.flip_prob
            )
            validate_branch_batch(tys, clusters[t], t)
            branch_batches.append((xb, yb))
        rng = _step_rng(hyper.seed, step, T)
        xs, ys, _ = shared_sampler.sample(rng, hyper.batch, hyper.flip_prob)
        losses = composite_step(model, store, (xs, ys), branch_batches,
                                hyper.lr, step)
        log.append(step, losses)
        if callback:
            callback(step, losses)
    return model, store, log


def train_relabel_variant(split, partition, hyper, shared_depth=2, cfg=None,
                          store=None):
    """Branch-only ablation: out-of-cluster attacks are labeled bona fide.

    No shared loss and no routing mask -- each branch's cross-entropy flows
    through the trunk as well.  The decision layer is left untrained; the
    model's final score is the max over branch scores.  With a single branch
    this reduces exactly to baseline training.
    """
    _check_classes(split.labels)
    cfg = cfg or NetConfig(image_size=split.x.shape[1], channels=split.x.shape[3])
    T = partition.n_clusters
    model = BranchedNet(cfg, n_branches=T, shared_depth=shared_depth)
    if store is None:
        store = model.init_params(hyper.seed)
    clusters = [set(c) for c in partition.clusters()]
    all_types = [t for cluster in partition.clusters() for t in cluster]
    sampler = BatchSampler(split.x, split.labels, split.attack_types, all_types)
    log = LossLog(columns=[f"branch_{t}" for t in range(T)])
    for step in range(1, hyper.iters + 1):
        batches = []
        for t in range(T):
            rng = _step_rng(hyper.seed, step, t)
            xb, yb, _ = sampler.sample(
                rng, hyper.batch, hyper.flip_prob,
                label_of_type=lambda ty, c=clusters[t]: 1.0 if ty in c else 0.0,
            )
            batches.append((xb, yb))
        grads = {}
        losses = model.all_branch_losses_and_grads(
            store, batches, grads, through_trunk=True
        )
        nn.adam_step(store, grads, hyper.lr, step)
        log.append(step, losses)
    return model, store, log


def relabel_score(model, store, x):
    """Final score of the relabel variant: max over branch scores."""
    _, branch_scores = model.score(store, x)
    return branch_scores.max(axis=1)
