"""End-to-end experiment orchestration with persisted, resumable artifacts.

Stage 1 trains the baseline detector, embeds validation attacks, and
partitions attack types by k-means on the per-type mean embeddings.  Stage 2
trains the branched detector on that partition with the routed composite
loss.  Evaluation produces a JSON report whose non-timing content is a pure
function of (config, seed); wall-clock numbers live under "timing_seconds".

Independent runs (benchmark seeds, unseen-attack folds) can execute as
separate worker processes; UFAD_THREADS caps that parallelism.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import classify, cluster, fusion, metrics, nn, training
from .config import config_hash, stamp
from .data import make_dataset, write_manifest
from .models import BranchedNet, JointNet, NetConfig
from .training import Hyper


class StageError(RuntimeError):
    """A pipeline stage failed; message names the stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _hyper(cfg, seed=None):
    t = cfg.training
    return Hyper(
        lr=t.lr,
        batch=t.batch,
        branch_batch=t.branch_batch,
        iters=t.iters,
        flip_prob=t.flip_prob,
        seed=cfg.master_seed if seed is None else seed,
    )


def _net_config(cfg):
    return NetConfig(image_size=cfg.dataset.image_size, channels=cfg.dataset.channels)


def ensure_dataset(cfg, workdir=None):
    ds = make_dataset(cfg.resolved_dataset())
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        manifest = workdir / "manifest.jsonl"
        if not manifest.exists():
            write_manifest(manifest, ds)
    return ds


def _ckpt_matches(path, cfg):
    if not Path(path).exists():
        return None
    store, meta = nn.load_checkpoint(path)
    if meta.get("config_hash") != config_hash(cfg):
        return None
    return store, meta


def _save_model(path, cfg, store, extra_meta):
    meta = {**stamp(cfg), **extra_meta}
    nn.save_checkpoint(path, store, meta)


def write_scores_csv(path, seeds, labels, attack_types, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "attack_type", "score"])
        for sid, lab, at, sc in zip(seeds, labels, attack_types, scores):
            w.writerow([int(sid), int(lab), int(at), f"{float(sc):.8f}"])


def write_loss_csv(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + list(log.columns))
        for row in log.rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])


def write_similarity_csv(path, sim, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type"] + names)
        for name, row in zip(names, sim):
            w.writerow([name] + [f"{v:.6f}" for v in row])


# ---------------------------------------------------------------------------
# stage 1: baseline training + auxiliary task construction


def train_joint_detector(cfg, ds, workdir=None, resume=False, name="joint",
                         types=None, iters=None, seed=None):
    """Train (or reload) a baseline detector on the given attack types."""
    split = ds.split("train")
    type_ids = types if types is not None else sorted(
        set(split.attack_types.tolist()) - {-1}
    )
    hyper = _hyper(cfg, seed=seed)
    if iters is not None:
        hyper.iters = iters
    ckpt = None if workdir is None else Path(workdir) / f"{name}.ckpt"
    if resume and ckpt is not None:
        hit = _ckpt_matches(ckpt, cfg)
        if hit is not None:
            model = JointNet(_net_config(cfg))
            return model, hit[0], None, True
    model, store, log = training.train_joint(
        split, type_ids, hyper, cfg=_net_config(cfg)
    )
    if ckpt is not None:
        _save_model(ckpt, cfg, store, {"kind": "joint", "name": name,
                                       "types": list(map(int, type_ids)),
                                       "seed": hyper.seed, "step": hyper.iters})
        write_loss_csv(Path(workdir) / f"{name}_losses.csv", log)
    return model, store, log, False


def build_partition(cfg, ds, joint_model=None, joint_store=None, workdir=None,
                    n_clusters=None, source=None):
    """Construct the attack-type partition per the configured source."""
    source = source or cfg.partition.source
    T = n_clusters or cfg.partition.n_clusters
    types = [t for t in ds.types if t.type_id not in cfg.dataset.holdout_types]
    type_ids = [t.type_id for t in types]
    sim = None
    if source == "kmeans":
        if joint_model is None:
            raise StageError("cluster", "kmeans partition needs a trained baseline")
        val = ds.split("val")
        atk = val.attack_types >= 0
        emb = joint_model.embed(joint_store, val.x[atk])
        table = cluster.mean_features(emb, val.attack_types[atk],
                                      expected_types=type_ids)
        sim = cluster.similarity_matrix(table)
        part = cluster.kmeans_partition(
            table, T, restarts=cfg.partition.restarts, seed=cfg.master_seed
        )
    elif source == "semantic":
        part = cluster.semantic_partition(types)
    elif source == "random":
        part = cluster.random_partition(type_ids, T, seed=cfg.master_seed)
    elif source == "manual":
        part = cluster.manual_partition(
            type_ids, [list(c) for c in cfg.partition.manual_clusters]
        )
    else:
        raise StageError("cluster", f"unknown partition source {source!r}")
    if workdir is not None:
        names = ds.type_names()
        payload = {**stamp(cfg), "source": source, **part.to_json(names)}
        with open(Path(workdir) / "partition.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        if sim is not None:
            ordered = [names[t] for t in part.type_ids]
            write_similarity_csv(Path(workdir) / "similarity.csv", sim, ordered)
    return part, sim


# ---------------------------------------------------------------------------
# stage 2: branched training


def train_branched_detector(cfg, ds, partition, workdir=None, resume=False,
                            name="branched", shared_depth=None, seed=None,
                            variant="composite"):
    split = ds.split("train")
    hyper = _hyper(cfg, seed=seed)
    sd = cfg.model.shared_depth if shared_depth is None else shared_depth
    ckpt = None if workdir is None else Path(workdir) / f"{name}.ckpt"
    if resume and ckpt is not None:
        hit = _ckpt_matches(ckpt, cfg)
        if hit is not None and hit[1].get("name") == name:
            model = BranchedNet(_net_config(cfg), partition.n_clusters, sd)
            return model, hit[0], None, True
    trainer = (training.train_branched if variant == "composite"
               else training.train_relabel_variant)
    model, store, log = trainer(split, partition, hyper, shared_depth=sd,
                                cfg=_net_config(cfg))
    if ckpt is not None:
        _save_model(
            ckpt, cfg, store,
            {"kind": "branched", "name": name, "variant": variant,
             "shared_depth": sd, "seed": hyper.seed, "step": hyper.iters,
             "partition": partition.to_json()},
        )
        write_loss_csv(Path(workdir) / f"{name}_losses.csv", log)
    return model, store, log, False


# ---------------------------------------------------------------------------
# evaluation


def _score_split(score_fn, split):
    t0 = time.perf_counter()
    scores = score_fn(split.x)
    dt = time.perf_counter() - t0
    return scores, dt / max(1, len(split))


def evaluate_scores(cfg, ds, test_scores, val_scores):
    """Table-shaped evaluation block for one detector's scores."""
    test = ds.split("test")
    val = ds.split("val")
    tdr, threshold = metrics.tdr_at_fdr(test_scores, test.labels, cfg.fdr_target)
    acc, acc_thr, policy = metrics.accuracy(
        test_scores, test.labels, ("balanced_val", val_scores, val.labels)
    )
    rep = metrics.breakdown(
        test_scores, test.labels, test.attack_types, ds.category_of(),
        cfg.fdr_target,
    )
    return {
        "fdr_target": cfg.fdr_target,
        "overall_tdr": tdr,
        "threshold": threshold,
        "accuracy": acc,
        "accuracy_threshold": acc_thr,
        "accuracy_policy": policy,
        "per_type": {str(k): v for k, v in rep["per_type"].items()},
        "per_category": rep["per_category"],
    }


def branch_generalizability(cfg, ds, partition, branch_scores):
    """Per-branch TDR on within-cluster vs out-of-cluster attack types."""
    test = ds.split("test")
    bona = test.labels == 0
    out = []
    clusters = partition.clusters()
    for t in range(partition.n_clusters):
        inside = set(clusters[t])
        s_t = branch_scores[:, t]
        row = {"branch": t, "cluster": sorted(inside)}
        for key, member in (("within_tdr", True), ("outside_tdr", False)):
            is_group = np.array(
                [ty in inside if ty >= 0 else False for ty in test.attack_types]
            )
            if not member:
                is_group = (test.attack_types >= 0) & ~is_group
            mask = bona | is_group
            if not is_group.any():
                row[key] = None
                continue
            tdr, _ = metrics.tdr_at_fdr(
                s_t[mask], test.labels[mask], cfg.fdr_target
            )
            row[key] = tdr
        out.append(row)
    return out


def classification_report(cfg, ds, model, store, final_scores, threshold):
    """Type/category confusion over test attacks.

    Matrices cover every test attack (the classify-all flag) so rows are
    complete; detected-only accuracy at the detector's operating threshold
    is reported alongside.
    """
    train = ds.split("train")
    test = ds.split("test")
    atk_train = train.attack_types >= 0
    protos = classify.build_prototypes(
        model, store, train.x[atk_train], train.attack_types[atk_train],
        ds.category_of(),
    )
    atk_test = test.attack_types >= 0
    rep_all = classify.confusion(
        model, store, protos, test.x[atk_test], test.attack_types[atk_test]
    )
    detected = final_scores[atk_test] >= threshold
    block = {
        "type_accuracy": rep_all["type_accuracy"],
        "category_accuracy": rep_all["category_accuracy"],
        "type_matrix": rep_all["type_matrix"].tolist(),
        "category_matrix": rep_all["category_matrix"].tolist(),
        "type_ids": rep_all["type_ids"],
        "categories": rep_all["categories"],
        "n_attacks": int(atk_test.sum()),
        "n_detected": int(detected.sum()),
    }
    if detected.any() and len(set(
        np.asarray(test.attack_types[atk_test])[detected].tolist()
    )) >= 1:
        rep_det = classify.confusion(
            model, store, protos, test.x[atk_test], test.attack_types[atk_test],
            detected_mask=detected,
        )
        block["detected_only"] = {
            "type_accuracy": rep_det["type_accuracy"],
            "category_accuracy": rep_det["category_accuracy"],
            "n_classified": rep_det["n_classified"],
        }
    return block


# ---------------------------------------------------------------------------
# full pipeline


def run_pipeline(cfg, resume=False):
    """Stage 1 -> stage 2 -> evaluation.  Returns (report, run_info)."""
    workdir = Path(cfg.out_dir)
    workdir.mkdir(parents=True, exist_ok=True)
    info = {"workdir": str(workdir)}
    timing = {}

    t0 = time.perf_counter()
    try:
        ds = ensure_dataset(cfg, workdir)
    except Exception as exc:
        raise StageError("synth", exc) from exc
    timing["synth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        joint_model, joint_store, _, reused = train_joint_detector(
            cfg, ds, workdir, resume=resume
        )
        info["joint_reused"] = reused
        partition, _ = build_partition(
            cfg, ds, joint_model, joint_store, workdir
        )
    except StageError:
        raise
    except Exception as exc:
        raise StageError("stage1", exc) from exc
    timing["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        variant = "composite" if cfg.model.kind != "relabel" else "relabel"
        branched_model, branched_store, _, reused2 = train_branched_detector(
            cfg, ds, partition, workdir, resume=resume, variant=variant
        )
        info["branched_reused"] = reused2
    except StageError:
        raise
    except Exception as exc:
        raise StageError("stage2", exc) from exc
    timing["stage2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        report = _evaluate_pipeline(
            cfg, ds, workdir, joint_model, joint_store,
            branched_model, branched_store, partition, variant, timing,
        )
    except StageError:
        raise
    except Exception as exc:
        raise StageError("eval", exc) from exc
    timing["eval"] = time.perf_counter() - t0

    report["timing_seconds"] = {k: round(v, 3) for k, v in timing.items()}
    with open(workdir / "report.json", "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
    return report, info


def _evaluate_pipeline(cfg, ds, workdir, joint_model, joint_store,
                       branched_model, branched_store, partition, variant,
                       timing):
    test = ds.split("test")
    val = ds.split("val")
    names = ds.type_names()

    joint_test, per_sample_j = _score_split(
        lambda x: joint_model.score(joint_store, x), test
    )
    joint_val = joint_model.score(joint_store, val.x)

    if variant == "relabel":
        def final_fn(x):
            return training.relabel_score(branched_model, branched_store, x)
        branch_test = branched_model.score(branched_store, test.x)[1]
        branched_test, per_sample_b = _score_split(final_fn, test)
        branched_val = final_fn(val.x)
    else:
        (branched_test, branch_test), per_sample_b = _score_split(
            lambda x: branched_model.score(branched_store, x), test
        )
        branched_val = branched_model.score(branched_store, val.x)[0]

    write_scores_csv(workdir / "scores_joint_test.csv", test.seeds, test.labels,
                     test.attack_types, joint_test)
    write_scores_csv(workdir / "scores_branched_test.csv", test.seeds,
                     test.labels, test.attack_types, branched_test)

    joint_block = evaluate_scores(cfg, ds, joint_test, joint_val)
    branched_block = evaluate_scores(cfg, ds, branched_test, branched_val)
    branched_block["branches"] = branch_generalizability(
        cfg, ds, partition, branch_test
    )
    classification = classification_report(
        cfg, ds, branched_model, branched_store, branched_test,
        branched_block["threshold"],
    )
    timing["joint_score_per_sample"] = per_sample_j
    timing["branched_score_per_sample"] = per_sample_b

    return {
        **stamp(cfg),
        "seed": cfg.master_seed,
        "dataset": {
            "image_size": cfg.dataset.image_size,
            "num_types": cfg.dataset.num_types,
            "holdout_types": list(cfg.dataset.holdout_types),
            "counts": {s: int(len(ds.split(s))) for s in ("train", "val", "test")},
        },
        "partition": partition.to_json(names),
        "models": {"joint": joint_block, cfg.model.kind: branched_block},
        "classification": classification,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def report_without_volatile(report):
    """Strip wall-clock fields for byte-level reproducibility comparison."""
    out = dict(report)
    out.pop("timing_seconds", None)
    return out


# ---------------------------------------------------------------------------
# fusion of per-cluster specialists


def run_fusion(cfg, ds, partition, workdir=None, resume=False):
    """Train per-cluster specialists and fuse their scores on the test set."""
    test = ds.split("test")
    val = ds.split("val")
    train = ds.split("train")
    iters = cfg.training.specialist_iters or cfg.training.iters
    spec_test, spec_val, spec_train, standalone = [], [], [], []
    for t, cluster_types in enumerate(partition.clusters()):
        model, store, _, _ = train_joint_detector(
            cfg, ds, workdir, resume=resume, name=f"specialist{t}",
            types=cluster_types, iters=iters,
        )
        spec_test.append(model.score(store, test.x))
        spec_val.append(model.score(store, val.x))
        spec_train.append(model.score(store, train.x))
        tdr, _ = metrics.tdr_at_fdr(spec_test[-1], test.labels, cfg.fdr_target)
        val_tdr, _ = metrics.tdr_at_fdr(spec_val[-1], val.labels, cfg.fdr_target)
        standalone.append({"cluster": sorted(map(int, cluster_types)),
                           "test_tdr": tdr, "val_tdr": val_tdr})
    m_test = np.stack(spec_test, axis=1)
    m_val = np.stack(spec_val, axis=1)
    m_train = np.stack(spec_train, axis=1)

    rules = {}
    for rule in fusion.FUSION_RULES:
        fused_test = fusion.fuse_scores(rule, m_test)
        fused_val = fusion.fuse_scores(rule, m_val)
        block = evaluate_scores(cfg, ds, fused_test, fused_val)
        rules[rule] = {k: block[k] for k in
                       ("overall_tdr", "threshold", "accuracy")}

    # cascade: stages ordered by standalone validation TDR, first stage gets
    # half the FDR budget, the rest split evenly
    order = sorted(range(len(standalone)),
                   key=lambda t: -standalone[t]["val_tdr"])
    n = len(order)
    if n == 1:
        budgets = [cfg.fdr_target]
    else:
        budgets = [cfg.fdr_target / 2] + [cfg.fdr_target / 2 / (n - 1)] * (n - 1)
    val_bona = val.labels == 0
    thresholds = fusion.calibrate_cascade(
        [m_val[val_bona][:, t] for t in order], budgets
    )
    decisions, stages = fusion.cascade([m_test[:, t] for t in order], thresholds)
    cascade_block = {
        "order": order,
        "budgets": budgets,
        "thresholds": [float(t) for t in thresholds],
        "tdr": float(np.mean(decisions[test.labels == 1])),
        "measured_fdr": float(np.mean(decisions[test.labels == 0])),
    }

    gbdt = fusion.fit_gbdt(m_train, train.labels.astype(np.float64))
    gbdt_test = gbdt.predict_proba(m_test)
    gbdt_val = gbdt.predict_proba(m_val)
    gbdt_block = evaluate_scores(cfg, ds, gbdt_test, gbdt_val)

    block = {
        "specialists": standalone,
        "rules": rules,
        "best_rule": max(rules, key=lambda r: rules[r]["overall_tdr"]),
        "cascade": cascade_block,
        "gbdt": {k: gbdt_block[k] for k in
                 ("overall_tdr", "threshold", "accuracy")},
    }
    if workdir is not None:
        workdir = Path(workdir)
        write_scores_csv(workdir / "scores_gbdt_test.csv", test.seeds,
                         test.labels, test.attack_types, gbdt_test)
        for rule in fusion.FUSION_RULES:
            write_scores_csv(workdir / f"scores_fuse_{rule}_test.csv",
                             test.seeds, test.labels, test.attack_types,
                             fusion.fuse_scores(rule, m_test))
        with open(workdir / "gbdt.json", "w") as fh:
            json.dump({**stamp(cfg), **gbdt.to_json()}, fh, sort_keys=True)
        with open(workdir / "fusion.json", "w") as fh:
            json.dump(_jsonable({**stamp(cfg), **block}), fh, indent=2,
                      sort_keys=True)
    return block


# ---------------------------------------------------------------------------
# multi-model benchmark (shared by the ablate command and the study script)


def run_benchmark(cfg, seed, workdir=None, resume=False,
                  include=("joint", "proposed", "branch_kmeans", "relabel",
                           "fusion")):
    """Train the comparison set on one seed; returns {model: eval block}."""
    cfg = cfg.with_seed(seed)
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
    ds = ensure_dataset(cfg, workdir)
    test, val = ds.split("test"), ds.split("val")
    out = {"seed": seed}

    joint_model, joint_store, _, _ = train_joint_detector(
        cfg, ds, workdir, resume=resume
    )
    if "joint" in include:
        jt = joint_model.score(joint_store, test.x)
        jv = joint_model.score(joint_store, val.x)
        out["joint"] = evaluate_scores(cfg, ds, jt, jv)

    partition, _ = build_partition(cfg, ds, joint_model, joint_store, workdir)
    out["partition"] = partition.to_json(ds.type_names())

    def eval_branched(model, store, variant):
        if variant == "relabel":
            st = training.relabel_score(model, store, test.x)
            sv = training.relabel_score(model, store, val.x)
            branch_test = model.score(store, test.x)[1]
        else:
            st, branch_test = model.score(store, test.x)
            sv = model.score(store, val.x)[0]
        block = evaluate_scores(cfg, ds, st, sv)
        block["branches"] = branch_generalizability(cfg, ds, partition,
                                                    branch_test)
        return block, st

    if "proposed" in include:
        model, store, _, _ = train_branched_detector(
            cfg, ds, partition, workdir, resume=resume, name="proposed"
        )
        block, final_scores = eval_branched(model, store, "composite")
        out["proposed"] = block
        out["proposed"]["classification"] = classification_report(
            cfg, ds, model, store, final_scores, block["threshold"]
        )
    if "branch_kmeans" in include:
        model, store, _, _ = train_branched_detector(
            cfg, ds, partition, workdir, resume=resume, name="branch_kmeans",
            shared_depth=0,
        )
        out["branch_kmeans"], _ = eval_branched(model, store, "composite")
    if "relabel" in include:
        model, store, _, _ = train_branched_detector(
            cfg, ds, partition, workdir, resume=resume, name="relabel",
            variant="relabel",
        )
        out["relabel"], _ = eval_branched(model, store, "relabel")
    if "fusion" in include:
        out["fusion"] = run_fusion(cfg, ds, partition, workdir, resume=resume)
    return out


_BLAS_LIMITER = None


def _limit_worker_blas():
    """Pin worker processes to one BLAS thread to avoid oversubscription."""
    global _BLAS_LIMITER
    try:
        from threadpoolctl import threadpool_limits

        _BLAS_LIMITER = threadpool_limits(limits=1)
    except ImportError:
        pass


def _job_count(n_items, jobs=None):
    if jobs is None:
        jobs = os.cpu_count() or 1
        cap = os.environ.get("UFAD_THREADS")
        if cap:
            jobs = min(jobs, max(1, int(cap)))
    return max(1, min(jobs, n_items))


def _parallel_map(fn, items, jobs=None):
    """Order-preserving map over independent work items."""
    jobs = _job_count(len(items), jobs)
    if jobs <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs,
                             initializer=_limit_worker_blas) as pool:
        return list(pool.map(fn, items))


def _benchmark_one(args):
    cfg, seed, workdir, resume, include = args
    return run_benchmark(cfg, seed, workdir=workdir, resume=resume,
                         include=include)


def run_benchmark_seeds(cfg, seeds, workdir=None, resume=False,
                        include=("joint", "proposed", "branch_kmeans",
                                 "relabel", "fusion"),
                        jobs=None):
    """run_benchmark over several seeds, optionally as worker processes."""
    items = [
        (cfg, seed,
         None if workdir is None else str(Path(workdir) / f"seed{seed}"),
         resume, tuple(include))
        for seed in seeds
    ]
    return _parallel_map(_benchmark_one, items, jobs=jobs)


# ---------------------------------------------------------------------------
# ablation table and sweeps


def run_ablation(cfg, resume=False):
    """Component ablation rows plus optional shared-depth / branch sweeps."""
    workdir = Path(cfg.out_dir)
    workdir.mkdir(parents=True, exist_ok=True)
    ds = ensure_dataset(cfg, workdir)
    test, val = ds.split("test"), ds.split("val")

    joint_model, joint_store, _, _ = train_joint_detector(
        cfg, ds, workdir, resume=resume
    )
    kmeans_part, _ = build_partition(cfg, ds, joint_model, joint_store, workdir)
    semantic_part, _ = build_partition(cfg, ds, source="semantic")

    def tdr_of(scores_test):
        return metrics.tdr_at_fdr(scores_test, test.labels, cfg.fdr_target)[0]

    def branched_tdr(partition, shared_depth, name, seed=None):
        model, store, _, _ = train_branched_detector(
            cfg, ds, partition, workdir, resume=resume, name=name,
            shared_depth=shared_depth, seed=seed,
        )
        return tdr_of(model.score(store, test.x)[0])

    rows = {}
    rows["joint"] = {"tdr": tdr_of(joint_model.score(joint_store, test.x)),
                     "modules": {"shared": True, "branching": False,
                                 "kmeans": False}}
    rows["branch_semantic"] = {
        "tdr": branched_tdr(semantic_part, 0, "ab_branch_semantic"),
        "modules": {"shared": False, "branching": True, "kmeans": False},
    }
    trials = []
    for i in range(cfg.sweep.random_trials):
        rp = cluster.random_partition(
            [t.type_id for t in ds.types
             if t.type_id not in cfg.dataset.holdout_types],
            cfg.partition.n_clusters, seed=cfg.master_seed + 1000 + i,
        )
        trials.append(branched_tdr(rp, 0, f"ab_branch_random{i}",
                                   seed=cfg.master_seed + 1000 + i))
    rows["branch_random"] = {
        "tdr_mean": float(np.mean(trials)),
        "tdr_std": float(np.std(trials)),
        "trials": trials,
        "n_trials": len(trials),
        "modules": {"shared": False, "branching": True, "kmeans": False},
    }
    rows["branch_kmeans"] = {
        "tdr": branched_tdr(kmeans_part, 0, "ab_branch_kmeans"),
        "modules": {"shared": False, "branching": True, "kmeans": True},
    }
    rows["shared_semantic"] = {
        "tdr": branched_tdr(semantic_part, cfg.model.shared_depth,
                            "ab_shared_semantic"),
        "modules": {"shared": True, "branching": True, "kmeans": False},
    }
    rows["proposed"] = {
        "tdr": branched_tdr(kmeans_part, cfg.model.shared_depth, "ab_proposed"),
        "modules": {"shared": True, "branching": True, "kmeans": True},
    }

    sweeps = {"shared_depth": [], "n_branches": []}
    for depth in cfg.sweep.shared_depths:
        sweeps["shared_depth"].append({
            "shared_depth": depth,
            "tdr": branched_tdr(kmeans_part, depth, f"sw_depth{depth}"),
        })
    for T in cfg.sweep.branch_counts:
        part_t, _ = build_partition(cfg, ds, joint_model, joint_store,
                                    n_clusters=T)
        sweeps["n_branches"].append({
            "n_branches": T,
            "tdr": branched_tdr(part_t, cfg.model.shared_depth, f"sw_T{T}"),
        })

    table = {**stamp(cfg), "seed": cfg.master_seed, "rows": rows,
             "sweeps": sweeps}
    with open(workdir / "ablation.json", "w") as fh:
        json.dump(_jsonable(table), fh, indent=2, sort_keys=True)
    with open(workdir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "tdr", "tdr_std"])
        for name, row in rows.items():
            w.writerow([name, row.get("tdr", row.get("tdr_mean")),
                        row.get("tdr_std", "")])
    return table


# ---------------------------------------------------------------------------
# unseen-attack folds


def fold_holdouts(partition, n_folds):
    """Per-fold held-out types: about 1/n_folds of each cluster per fold.

    Clusters never lose every type; singleton clusters are never held out.
    """
    folds = [[] for _ in range(n_folds)]
    for cluster_types in partition.clusters():
        ordered = sorted(cluster_types)
        if len(ordered) < 2:
            continue
        per_fold = [[] for _ in range(n_folds)]
        for i, t in enumerate(ordered):
            per_fold[i % n_folds].append(t)
        for f in range(n_folds):
            if len(per_fold[f]) < len(ordered):  # keep the cluster populated
                folds[f].extend(per_fold[f])
    return [sorted(f) for f in folds]


def _run_fold(args):
    cfg, partition, f, holdout, resume = args
    fold_cfg = replace(cfg, dataset=cfg.dataset.with_holdout(holdout),
                       out_dir=str(Path(cfg.out_dir) / f"fold{f}"))
    fold_dir = Path(fold_cfg.out_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    ds = ensure_dataset(fold_cfg, fold_dir)
    seen_partition = partition.restricted_to(
        [t for t in partition.type_ids if t not in holdout]
    )
    model, store, _, _ = train_branched_detector(
        fold_cfg, ds, seen_partition, fold_dir, resume=resume,
        name="proposed",
    )
    test = ds.split("test")
    scores = model.score(store, test.x)[0]
    _, threshold = metrics.tdr_at_fdr(scores, test.labels, cfg.fdr_target)
    unseen_mask = np.isin(test.attack_types, holdout)
    seen_mask = (test.attack_types >= 0) & ~unseen_mask
    return {
        "fold": f,
        "holdout": holdout,
        "threshold": threshold,
        "seen_tdr": float(np.mean(scores[seen_mask] >= threshold)),
        "unseen_tdr": float(np.mean(scores[unseen_mask] >= threshold))
        if unseen_mask.any() else None,
    }


def run_unseen(cfg, resume=False, jobs=None):
    """Hold out 1/3 of each cluster's types per fold; train on the rest."""
    workdir = Path(cfg.out_dir)
    workdir.mkdir(parents=True, exist_ok=True)
    base_ds = ensure_dataset(cfg, workdir)
    joint_model, joint_store, _, _ = train_joint_detector(
        cfg, ds=base_ds, workdir=workdir, resume=resume
    )
    partition, _ = build_partition(cfg, base_ds, joint_model, joint_store,
                                   workdir)
    known = {t.type_id for t in base_ds.types}
    folds = fold_holdouts(partition, cfg.folds.n_folds)
    bad = [t for f in folds for t in f if t not in known]
    if bad:
        raise StageError("unseen", f"fold spec references unknown types {bad}")

    per_fold = _parallel_map(
        _run_fold,
        [(cfg, partition, f, holdout, resume)
         for f, holdout in enumerate(folds)],
        jobs=jobs,
    )

    seen = [r["seen_tdr"] for r in per_fold]
    unseen = [r["unseen_tdr"] for r in per_fold if r["unseen_tdr"] is not None]
    report = {
        **stamp(cfg), "seed": cfg.master_seed,
        "folds": per_fold,
        "seen_tdr_mean": float(np.mean(seen)),
        "seen_tdr_std": float(np.std(seen)),
        "unseen_tdr_mean": float(np.mean(unseen)) if unseen else None,
        "unseen_tdr_std": float(np.std(unseen)) if unseen else None,
    }
    with open(workdir / "unseen.json", "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
    return report
