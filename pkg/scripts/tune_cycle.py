#!/usr/bin/env python3
"""One tuning cycle on a single seed: joint vs branched variants with
per-branch diagnostics.  Development aid while calibrating the benchmark."""

import argparse
import time

import numpy as np

from ufad.config import load_config
from ufad.metrics import breakdown, tdr_at_fdr
from ufad.pipeline import (
    _net_config,
    branch_generalizability,
    build_partition,
    ensure_dataset,
)
from ufad import training
from ufad.training import Hyper


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--branch-batch", type=int, default=8)
    ap.add_argument("--models", nargs="+",
                    default=["joint", "sd0", "sd2", "relabel"])
    args = ap.parse_args()

    cfg = load_config(args.config).with_seed(args.seed)
    ds = ensure_dataset(cfg)
    split, test = ds.split("train"), ds.split("test")
    names = ds.type_names()
    hyper = Hyper(lr=cfg.training.lr, batch=args.batch,
                  branch_batch=args.branch_batch, iters=args.iters,
                  seed=args.seed)

    t0 = time.perf_counter()
    jm, js, _ = training.train_joint(split, list(range(cfg.dataset.num_types)),
                                     hyper, cfg=_net_config(cfg))
    jt = time.perf_counter() - t0
    jscores = jm.score(js, test.x)
    jtdr, _ = tdr_at_fdr(jscores, test.labels, cfg.fdr_target)

    part, sim = build_partition(cfg, ds, jm, js)
    print(f"joint: {jt:.0f}s TDR {jtdr:.4f}")
    print("clusters:", [[names[t] for t in c] for c in part.clusters()])
    print("similarity matrix:")
    order = part.type_ids
    print("        " + " ".join(f"{names[t][:7]:>8s}" for t in order))
    for i, t in enumerate(order):
        print(f"{names[t][:7]:>7s} " + " ".join(f"{v:8.2f}" for v in sim[i]))

    if "joint" in args.models:
        rep = breakdown(jscores, test.labels, test.attack_types,
                        ds.category_of(), cfg.fdr_target)
        print("  joint per-type:",
              {names[t]: round(e["tdr"], 2) for t, e in rep["per_type"].items()})

    for tag in args.models:
        if tag == "joint":
            continue
        t0 = time.perf_counter()
        if tag == "relabel":
            bm, bs, _ = training.train_relabel_variant(
                split, part, hyper, shared_depth=cfg.model.shared_depth,
                cfg=_net_config(cfg))
            scores = training.relabel_score(bm, bs, test.x)
            branch_scores = bm.score(bs, test.x)[1]
        else:
            sd = int(tag[2:])
            bm, bs, _ = training.train_branched(
                split, part, hyper, shared_depth=sd, cfg=_net_config(cfg))
            scores, branch_scores = bm.score(bs, test.x)
        dt = time.perf_counter() - t0
        tdr, _ = tdr_at_fdr(scores, test.labels, cfg.fdr_target)
        print(f"{tag}: {dt:.0f}s TDR {tdr:.4f}  (joint {jtdr:.4f})")
        rep = breakdown(scores, test.labels, test.attack_types,
                        ds.category_of(), cfg.fdr_target)
        print("  per-type:",
              {names[t]: round(e["tdr"], 2) for t, e in rep["per_type"].items()})
        gen = branch_generalizability(cfg, ds, part, branch_scores)
        for row in gen:
            print(f"  branch {row['branch']} {row['cluster']}: "
                  f"within {row['within_tdr']:.3f} outside {row['outside_tdr']:.3f}")


if __name__ == "__main__":
    main()
