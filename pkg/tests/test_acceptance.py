"""Acceptance criteria, one test per criterion.

Criteria 1-4 and 10 are numeric oracles and finish in minutes.  Criteria 5-9
share one desk-scale benchmark fixture (3 seeds, 2000 training steps per
model) that dominates the runtime; set UFAD_ACCEPT_CACHE=DIR to reuse its
artifacts across repeated invocations while iterating.

A PASS/FAIL line per criterion is printed in the terminal summary (see
conftest.pytest_terminal_summary).
"""

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import fd_gradient, max_rel_err

from ufad import nn
from ufad.cluster import (
    MeanFeatureTable,
    brute_force_partition,
    kmeans_partition,
)
from ufad.config import config_hash, load_config
from ufad.metrics import accuracy, pick_threshold_balanced, tdr_at_fdr
from ufad.models import BranchedNet, NetConfig
from ufad.pipeline import (
    report_without_volatile,
    run_benchmark_seeds,
    run_pipeline,
    run_unseen,
)
from ufad.training import aux_only_gradients, composite_gradients

REPO = Path(__file__).resolve().parent.parent
DESK_SEEDS = (0, 1, 2)
GRAD_TOL = 1e-4


def desk_config():
    return load_config(REPO / "configs" / "desk.yaml")


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness, float64, < 2 min


def _micro_branched(rng):
    cfg = NetConfig(
        image_size=16,
        channels=int(rng.integers(1, 4)),
        conv_channels=tuple(int(rng.integers(2, 5)) for _ in range(4)),
        fc_dim=int(rng.integers(3, 7)),
    )
    T = int(rng.integers(2, 4))
    sd = int(rng.integers(0, 5))
    model = BranchedNet(cfg, n_branches=T, shared_depth=sd)
    store = model.init_params(int(rng.integers(1 << 30)), dtype=np.float64)
    return model, store


def _micro_batches(model, rng, n_shared=4, n_branch=3):
    c = model.cfg.channels
    xs = rng.standard_normal((n_shared, 16, 16, c))
    ys = rng.integers(0, 2, n_shared).astype(np.float64)
    bb = [
        (rng.standard_normal((n_branch, 16, 16, c)),
         rng.integers(0, 2, n_branch).astype(np.float64))
        for _ in range(model.n_branches)
    ]
    return (xs, ys), bb


def test_criterion_1_gradient_checks():
    t0 = time.perf_counter()

    # individual layer kinds
    for trial in range(10):
        rng = np.random.default_rng(1000 + trial)
        conv = nn.Conv4x4("c", int(rng.integers(1, 3)), int(rng.integers(1, 4)))
        params = {"w": rng.standard_normal((4, 4, conv.cin, conv.cout)),
                  "b": rng.standard_normal(conv.cout)}
        x = rng.standard_normal((2, 8, 8, conv.cin))
        w_out = rng.standard_normal((2, 4, 4, conv.cout))

        def conv_loss():
            return float((conv.forward(params, x)[0] * w_out).sum())

        _, ctx = conv.forward(params, x)
        dx, grads = conv.backward(params, ctx, w_out)
        for key in ("w", "b"):
            assert max_rel_err(grads[key], fd_gradient(conv_loss, params[key])) < GRAD_TOL
        assert max_rel_err(dx, fd_gradient(conv_loss, x)) < GRAD_TOL

        dense = nn.Dense("d", int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        dparams = {"w": rng.standard_normal((dense.cin, dense.cout)),
                   "b": rng.standard_normal(dense.cout)}
        dw_out = rng.standard_normal((3, dense.cout))
        dxin = rng.standard_normal((3, dense.cin))

        def dense_loss():
            return float((dense.forward(dparams, dxin)[0] * dw_out).sum())

        _, dctx = dense.forward(dparams, dxin)
        ddx, dgrads = dense.backward(dparams, dctx, dw_out)
        for key in ("w", "b"):
            assert max_rel_err(dgrads[key], fd_gradient(dense_loss, dparams[key])) < GRAD_TOL
        assert max_rel_err(ddx, fd_gradient(dense_loss, dxin)) < GRAD_TOL

        act = nn.LeakyReLU("a")
        ax = rng.standard_normal((4, 6))
        ax[np.abs(ax) < 1e-3] += 0.01
        aw = rng.standard_normal(ax.shape)

        def act_loss():
            return float((act.forward({}, ax)[0] * aw).sum())

        adx, _ = act.backward({}, act.forward({}, ax)[1], aw)
        assert max_rel_err(adx, fd_gradient(act_loss, ax)) < GRAD_TOL

        z = rng.standard_normal(6) * 3
        t = rng.integers(0, 2, 6).astype(np.float64)
        _, dz = nn.bce_with_logits(z, t)
        assert max_rel_err(
            dz, fd_gradient(lambda: float(nn.bce_with_logits(z, t)[0]), z)
        ) < GRAD_TOL

    # routed composite loss on micro branched models
    for trial in range(10):
        rng = np.random.default_rng(2000 + trial)
        model, store = _micro_branched(rng)
        shared_batch, branch_batches = _micro_batches(model, rng)
        losses, grads = composite_gradients(model, store, shared_batch,
                                            branch_batches)

        def masked_loss(name):
            def f():
                total = model.shared_loss_and_grads(store, *shared_batch, {})
                if name.startswith("branch"):
                    t = int(name.split("/")[0][len("branch"):])
                    total += model.branch_loss_and_grads(
                        store, t, *branch_batches[t], {}, through_trunk=False
                    )
                return float(total)
            return f

        worst = 0.0
        for name in sorted(grads):
            p = store.tensors[name]
            flat = p.reshape(-1)
            f = masked_loss(name)
            idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + 1e-5
                lp = f()
                flat[i] = orig - 1e-5
                lm = f()
                flat[i] = orig
                num = (lp - lm) / 2e-5
                ana = grads[name].reshape(-1)[i]
                worst = max(worst, abs(ana - num) / max(1e-6, abs(ana), abs(num)))
        assert worst < GRAD_TOL, f"instance {trial}: rel err {worst:.2e}"

    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"gradient checks took {elapsed:.0f}s (budget 120s)"


# ---------------------------------------------------------------------------
# criterion 2: routing contract, exact zeros


def test_criterion_2_routing_exact_zero():
    for trial in range(10):
        rng = np.random.default_rng(3000 + trial)
        model, store = _micro_branched(rng)
        if model.shared_depth == 0:
            model = BranchedNet(
                replace(model.cfg), n_branches=model.n_branches, shared_depth=2
            )
            store = model.init_params(trial, dtype=np.float64)
        _, branch_batches = _micro_batches(model, rng)
        _, grads = aux_only_gradients(model, store, branch_batches)
        for name in model.trunk_param_names():
            assert np.all(grads[name] == 0.0), name
        for name in model.decision_param_names():
            assert np.all(grads[name] == 0.0), name
        touched = [
            name
            for t in range(model.n_branches)
            for name in model.branch_param_names(t)
            if np.any(grads[name] != 0.0)
        ]
        assert touched, "auxiliary losses moved no branch parameters"


# ---------------------------------------------------------------------------
# criterion 3: k-means vs brute force, < 1 min


def test_criterion_3_clustering_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    hits = 0
    total = 0
    for T in (2, 3, 4):
        for _ in range(20):
            L = int(rng.integers(max(T, 5), 9))
            centers = rng.standard_normal((T, 8)) * 2.0
            means = np.stack([
                centers[rng.integers(T)] + rng.standard_normal(8)
                for _ in range(L)
            ])
            table = MeanFeatureTable(list(range(L)), means)
            km = kmeans_partition(table, T, restarts=50,
                                  seed=int(rng.integers(1 << 30)))
            bf = brute_force_partition(table, T)
            total += 1
            assert km.wcss <= bf.wcss * 1.05 + 1e-12, (
                f"kmeans exceeded brute force by more than 5%: "
                f"{km.wcss} vs {bf.wcss}"
            )
            if km.wcss <= bf.wcss + max(1e-9, 1e-9 * bf.wcss):
                hits += 1
    assert hits >= 0.95 * total, f"optimal in only {hits}/{total} instances"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"clustering oracle took {elapsed:.0f}s (budget 60s)"


# ---------------------------------------------------------------------------
# criterion 4: metric oracles


def _oracle_tdr(scores, labels, target):
    bona = scores[labels == 0]
    attacks = scores[labels == 1]
    for tau in sorted(scores) + [np.inf]:
        if np.mean(bona >= tau) <= target:
            return float(np.mean(attacks >= tau)), tau
    raise AssertionError("unreachable")


def _oracle_balanced(scores, labels):
    bona = scores[labels == 0]
    attacks = scores[labels == 1]
    best = (-1.0, None)
    for tau in sorted(set(scores.tolist())) + [np.inf]:
        bacc = 0.5 * (np.mean(bona < tau) + np.mean(attacks >= tau))
        if bacc > best[0]:
            best = (bacc, tau)
    return best[1], best[0]


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(4)
    for trial in range(100):
        n = 200
        scores = np.round(rng.random(n), 2)  # ties on purpose
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        target = float(rng.choice([0.002, 0.02, 0.05, 0.2]))
        tdr, tau = tdr_at_fdr(scores, labels, target)
        otdr, otau = _oracle_tdr(scores, labels, target)
        assert (tdr, tau) == (otdr, otau), f"instance {trial}"
        thr, bacc = pick_threshold_balanced(scores, labels)
        othr, obacc = _oracle_balanced(scores, labels)
        assert thr == othr and abs(bacc - obacc) < 1e-12, f"instance {trial}"
        acc, thr2, _ = accuracy(scores, labels, ("balanced_val", scores, labels))
        assert thr2 == othr

    n = 10**5
    scores = rng.random(n)
    labels = np.concatenate([np.zeros(n // 2), np.ones(n // 2)])
    rng.shuffle(labels)
    target = 0.002
    tdr, _ = tdr_at_fdr(scores, labels, target)
    sigma = np.sqrt(target * (1 - target) / (n // 2))
    assert abs(tdr - target) < 3 * sigma


# ---------------------------------------------------------------------------
# criteria 5-9 share the desk benchmark fixture


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = desk_config()
    cache_dir = os.environ.get("UFAD_ACCEPT_CACHE")
    cache = None
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        cache = Path(cache_dir) / f"desk_{config_hash(cfg)}.json"
        if cache.exists():
            return json.loads(cache.read_text())

    base = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    core = run_benchmark_seeds(
        cfg, DESK_SEEDS, workdir=base,
        include=("joint", "branch_kmeans", "proposed"),
    )
    core_wall = time.perf_counter() - t0
    extras = run_benchmark_seeds(
        cfg, DESK_SEEDS, workdir=base, resume=True,
        include=("relabel", "fusion"),
    )
    results = [{**c, **e} for c, e in zip(core, extras)]
    unseen = run_unseen(
        cfg.with_seed(DESK_SEEDS[0]).with_out_dir(base / "unseen")
    )
    payload = {
        "results": results,
        "unseen": unseen,
        "core_wall_seconds": core_wall,
    }
    if cache:
        from ufad.pipeline import _jsonable

        cache.write_text(json.dumps(_jsonable(payload)))
        payload = json.loads(cache.read_text())
    return payload


def _mean(results, key):
    return float(np.mean([r[key]["overall_tdr"] for r in results]))


def test_criterion_5_desk_ordering_and_budget(desk):
    results = desk["results"]
    joint = _mean(results, "joint")
    branch_kmeans = _mean(results, "branch_kmeans")
    proposed = _mean(results, "proposed")
    assert joint < branch_kmeans, (
        f"mean TDR: joint {joint:.4f} !< branch_kmeans {branch_kmeans:.4f}"
    )
    assert branch_kmeans < proposed, (
        f"mean TDR: branch_kmeans {branch_kmeans:.4f} !< proposed {proposed:.4f}"
    )
    assert proposed - joint >= 0.05, (
        f"proposed-joint gap {proposed - joint:.4f} < 0.05 "
        f"(joint {joint:.4f}, proposed {proposed:.4f})"
    )
    assert desk["core_wall_seconds"] < 3600, (
        f"criterion-5 runs took {desk['core_wall_seconds']:.0f}s"
    )


def test_criterion_6_desk_ordering_vs_variants(desk):
    results = desk["results"]
    proposed = _mean(results, "proposed")
    relabel = _mean(results, "relabel")
    assert proposed >= relabel, (
        f"proposed {proposed:.4f} < relabel variant {relabel:.4f}"
    )
    rule_means = {
        rule: float(np.mean([
            r["fusion"]["rules"][rule]["overall_tdr"] for r in results
        ]))
        for rule in results[0]["fusion"]["rules"]
    }
    best_rule = max(rule_means, key=rule_means.get)
    assert proposed >= rule_means[best_rule], (
        f"proposed {proposed:.4f} < best fusion rule "
        f"{best_rule} {rule_means[best_rule]:.4f}"
    )


def test_criterion_7_branch_generalizability(desk):
    for r in desk["results"]:
        branches = r["proposed"]["branches"]
        ok = sum(
            1 for row in branches
            if row["within_tdr"] is not None and row["outside_tdr"] is not None
            and row["within_tdr"] >= row["outside_tdr"]
        )
        T = len(branches)
        assert ok >= T - 1, (
            f"seed {r['seed']}: only {ok}/{T} branches have "
            f"within >= outside TDR"
        )


def test_criterion_8_classification_structure(desk):
    for r in desk["results"]:
        cls = r["proposed"]["classification"]
        assert cls["category_accuracy"] > cls["type_accuracy"], (
            f"seed {r['seed']}: category {cls['category_accuracy']:.4f} "
            f"!> type {cls['type_accuracy']:.4f}"
        )
        for matrix in (cls["type_matrix"], cls["category_matrix"]):
            for row in np.asarray(matrix):
                if row.sum() > 0:
                    assert abs(row.sum() - 1.0) < 1e-9


def test_criterion_9_unseen_folds(desk):
    unseen = desk["unseen"]
    assert unseen["unseen_tdr_mean"] is not None
    assert unseen["unseen_tdr_mean"] <= unseen["seen_tdr_mean"], (
        f"unseen {unseen['unseen_tdr_mean']:.4f} > "
        f"seen {unseen['seen_tdr_mean']:.4f}"
    )


# ---------------------------------------------------------------------------
# criterion 10: byte-identical reports


def test_criterion_10_reproducibility(tmp_path):
    cfg = desk_config()
    cfg = replace(
        cfg,
        dataset=replace(cfg.dataset,
                        bona_fide={"train": 200, "val": 80, "test": 120},
                        attacks_per_type={"train": 24, "val": 9, "test": 14}),
        training=replace(cfg.training, iters=150, batch=16, branch_batch=8),
        master_seed=7,
    )
    run_pipeline(cfg.with_out_dir(tmp_path / "run1"))
    run_pipeline(cfg.with_out_dir(tmp_path / "run2"))
    r1 = json.loads((tmp_path / "run1" / "report.json").read_text())
    r2 = json.loads((tmp_path / "run2" / "report.json").read_text())
    b1 = json.dumps(report_without_volatile(r1), sort_keys=True).encode()
    b2 = json.dumps(report_without_volatile(r2), sort_keys=True).encode()
    assert b1 == b2, "reports differ beyond wall-clock fields"
