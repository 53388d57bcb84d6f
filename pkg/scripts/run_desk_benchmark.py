#!/usr/bin/env python3
"""Multi-seed desk benchmark: trains the full comparison set per seed.

For each seed this trains the baseline detector, the k-means-partitioned
branched detector with and without a shared trunk, the relabel variant, and
three per-cluster specialists (for the fusion baselines), then prints the
mean TDR orderings that the acceptance suite gates on.

Usage:
    python scripts/run_desk_benchmark.py --config configs/desk.yaml \
        --out runs/desk_bench --seeds 0 1 2
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from ufad.config import ExperimentConfig, load_config
from ufad.pipeline import run_benchmark, _jsonable


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/desk_bench")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--resume", action="store_true")
    ap.add_argument(
        "--include", nargs="+",
        default=["joint", "proposed", "branch_kmeans", "relabel", "fusion"],
    )
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        res = run_benchmark(
            cfg.with_out_dir(out / f"seed{seed}"), seed,
            workdir=out / f"seed{seed}", resume=args.resume,
            include=tuple(args.include),
        )
        res["wall_seconds"] = round(time.perf_counter() - t0, 1)
        results.append(res)
        print(f"--- seed {seed} ({res['wall_seconds']}s) ---")
        for key in ("joint", "branch_kmeans", "proposed", "relabel"):
            if key in res:
                print(f"  {key:14s} TDR {res[key]['overall_tdr']:.4f}")
        if "fusion" in res:
            fb = res["fusion"]
            print(f"  fusion best   {fb['best_rule']} "
                  f"TDR {fb['rules'][fb['best_rule']]['overall_tdr']:.4f} "
                  f"gbdt {fb['gbdt']['overall_tdr']:.4f} "
                  f"cascade {fb['cascade']['tdr']:.4f}")

    with open(out / "benchmark.json", "w") as fh:
        json.dump(_jsonable({"seeds": args.seeds, "results": results}), fh,
                  indent=2, sort_keys=True)

    def mean_tdr(key):
        vals = [r[key]["overall_tdr"] for r in results if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    print("\n=== means over seeds ===")
    for key in ("joint", "branch_kmeans", "proposed", "relabel"):
        print(f"{key:14s} {mean_tdr(key):.4f}")
    if all("fusion" in r for r in results):
        best = np.mean([
            max(rule["overall_tdr"] for rule in r["fusion"]["rules"].values())
            for r in results
        ])
        print(f"{'fusion best':14s} {best:.4f}")
    print(f"\nproposed - joint gap: {mean_tdr('proposed') - mean_tdr('joint'):+.4f}")


if __name__ == "__main__":
    main()
