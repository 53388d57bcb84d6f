"""Command-line interface.

Subcommands: synth | train | cluster | pipeline | fuse | eval | ablate |
unseen | report.  Every run is reproducible from (--config, --seed); outputs
embed the config hash and tool version.  Exit codes: 0 success, 2 config
error, 3 runtime error.  UFAD_THREADS caps BLAS/worker parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__, nn
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .data import write_tensor_cache
from .models import BranchedNet, JointNet, NetConfig
from .pipeline import (
    StageError,
    build_partition,
    ensure_dataset,
    evaluate_scores,
    run_ablation,
    run_benchmark,
    run_fusion,
    run_pipeline,
    run_unseen,
    train_branched_detector,
    train_joint_detector,
    write_scores_csv,
)


def _apply_thread_cap():
    cap = os.environ.get("UFAD_THREADS")
    if not cap:
        return None
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=int(cap))
    except (ImportError, ValueError):
        return None


def _load(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out_dir(args.out)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(cfg.out_dir) / "config.json", "w") as fh:
        from .config import to_tree

        json.dump(
            {"config": to_tree(cfg), "config_hash": config_hash(cfg),
             "tool_version": __version__},
            fh, indent=2, sort_keys=True,
        )
    return cfg


def cmd_synth(args):
    cfg = _load(args)
    ds = ensure_dataset(cfg, cfg.out_dir)
    manifest = Path(cfg.out_dir) / "manifest.jsonl"
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    if args.cache:
        for split in ("train", "val", "test"):
            write_tensor_cache(Path(cfg.out_dir) / f"{split}.ufad",
                               ds.split(split).x)
    print(f"dataset: {sum(len(ds.split(s)) for s in ds.splits)} samples, "
          f"{cfg.dataset.num_types} attack types")
    print(f"manifest sha256: {digest}")
    return 0


def cmd_train(args):
    cfg = _load(args)
    ds = ensure_dataset(cfg, cfg.out_dir)
    if cfg.model.kind == "joint":
        _, _, _, reused = train_joint_detector(cfg, ds, cfg.out_dir,
                                               resume=args.resume)
        print(f"joint detector {'reused' if reused else 'trained'}")
        return 0
    joint_model = joint_store = None
    if cfg.partition.source == "kmeans":
        joint_model, joint_store, _, _ = train_joint_detector(
            cfg, ds, cfg.out_dir, resume=args.resume
        )
    partition, _ = build_partition(cfg, ds, joint_model, joint_store,
                                   cfg.out_dir)
    variant = "relabel" if cfg.model.kind == "relabel" else "composite"
    _, _, _, reused = train_branched_detector(
        cfg, ds, partition, cfg.out_dir, resume=args.resume,
        name=cfg.model.kind, variant=variant,
    )
    print(f"{cfg.model.kind} detector {'reused' if reused else 'trained'} "
          f"(T={partition.n_clusters}, shared_depth={cfg.model.shared_depth})")
    return 0


def cmd_cluster(args):
    cfg = _load(args)
    ds = ensure_dataset(cfg, cfg.out_dir)
    joint_model = joint_store = None
    if cfg.partition.source == "kmeans":
        joint_model, joint_store, _, _ = train_joint_detector(
            cfg, ds, cfg.out_dir, resume=args.resume
        )
    partition, _ = build_partition(cfg, ds, joint_model, joint_store,
                                   cfg.out_dir)
    print(json.dumps(partition.to_json(ds.type_names()), indent=2,
                     sort_keys=True))
    return 0


def cmd_pipeline(args):
    cfg = _load(args)
    report, info = run_pipeline(cfg, resume=args.resume)
    model_key = cfg.model.kind
    print(f"report: {Path(cfg.out_dir) / 'report.json'}")
    print(f"joint TDR@{cfg.fdr_target:.1%} FDR: "
          f"{report['models']['joint']['overall_tdr']:.4f}")
    print(f"{model_key} TDR@{cfg.fdr_target:.1%} FDR: "
          f"{report['models'][model_key]['overall_tdr']:.4f}")
    return 0


def cmd_fuse(args):
    cfg = _load(args)
    ds = ensure_dataset(cfg, cfg.out_dir)
    joint_model = joint_store = None
    if cfg.partition.source == "kmeans":
        joint_model, joint_store, _, _ = train_joint_detector(
            cfg, ds, cfg.out_dir, resume=args.resume
        )
    partition, _ = build_partition(cfg, ds, joint_model, joint_store,
                                   cfg.out_dir)
    block = run_fusion(cfg, ds, partition, cfg.out_dir, resume=args.resume)
    best = block["best_rule"]
    print(f"best fusion rule: {best} "
          f"(TDR {block['rules'][best]['overall_tdr']:.4f}); "
          f"gbdt TDR {block['gbdt']['overall_tdr']:.4f}")
    return 0


def cmd_eval(args):
    cfg = _load(args)
    store, meta = nn.load_checkpoint(args.ckpt)
    ds = ensure_dataset(cfg, cfg.out_dir)
    net_cfg = NetConfig(image_size=cfg.dataset.image_size,
                        channels=cfg.dataset.channels)
    test, val = ds.split("test"), ds.split("val")
    if meta.get("kind") == "joint":
        model = JointNet(net_cfg)
        test_scores = model.score(store, test.x)
        val_scores = model.score(store, val.x)
    else:
        T = meta["partition"]["T"]
        model = BranchedNet(net_cfg, T, meta["shared_depth"])
        if meta.get("variant") == "relabel":
            from .training import relabel_score

            test_scores = relabel_score(model, store, test.x)
            val_scores = relabel_score(model, store, val.x)
        else:
            test_scores = model.score(store, test.x)[0]
            val_scores = model.score(store, val.x)[0]
    block = evaluate_scores(cfg, ds, test_scores, val_scores)
    out = Path(cfg.out_dir) / "eval.json"
    with open(out, "w") as fh:
        json.dump({"config_hash": config_hash(cfg),
                   "tool_version": __version__,
                   "checkpoint": str(args.ckpt), **block},
                  fh, indent=2, sort_keys=True)
    write_scores_csv(Path(cfg.out_dir) / "scores_eval_test.csv", test.seeds,
                     test.labels, test.attack_types, test_scores)
    print(f"TDR@{cfg.fdr_target:.1%} FDR: {block['overall_tdr']:.4f} "
          f"accuracy: {block['accuracy']:.4f}")
    return 0


def cmd_ablate(args):
    cfg = _load(args)
    table = run_ablation(cfg, resume=args.resume)
    for name, row in table["rows"].items():
        tdr = row.get("tdr", row.get("tdr_mean"))
        std = f" +/- {row['tdr_std']:.4f}" if "tdr_std" in row else ""
        print(f"{name:18s} TDR {tdr:.4f}{std}")
    return 0


def cmd_unseen(args):
    cfg = _load(args)
    report = run_unseen(cfg, resume=args.resume)
    print(f"seen TDR {report['seen_tdr_mean']:.4f} "
          f"+/- {report['seen_tdr_std']:.4f}; "
          f"unseen TDR {report['unseen_tdr_mean']:.4f} "
          f"+/- {report['unseen_tdr_std']:.4f}")
    return 0


def cmd_report(args):
    cfg = _load(args)
    out = Path(cfg.out_dir)
    made = _render_plots(out)
    for path in made:
        print(f"wrote {path}")
    if not made:
        print("no artifacts found to plot", file=sys.stderr)
        return 3
    return 0


def _render_plots(out):
    import csv as _csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    from .metrics import roc_curve

    made = []
    plots = out / "plots"
    plots.mkdir(exist_ok=True)

    score_files = sorted(out.glob("scores_*_test.csv"))
    if score_files:
        fig, ax = plt.subplots(figsize=(6, 5))
        for path in score_files:
            rows = list(_csv.DictReader(open(path)))
            scores = np.array([float(r["score"]) for r in rows])
            labels = np.array([int(r["label"]) for r in rows])
            roc = roc_curve(scores, labels)
            name = path.stem.replace("scores_", "").replace("_test", "")
            ax.plot(roc.fdr, roc.tdr, label=name)
        ax.set_xscale("log")
        ax.set_xlabel("FDR")
        ax.set_ylabel("TDR")
        ax.legend()
        fig.savefig(plots / "roc.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        made.append(plots / "roc.png")

    report_path = out / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
        fig, ax = plt.subplots(figsize=(7, 4))
        offset = 0.0
        width = 0.8 / max(1, len(report["models"]))
        for name, block in report["models"].items():
            per_type = block["per_type"]
            xs = np.arange(len(per_type)) + offset
            ax.bar(xs, [per_type[k]["tdr"] for k in sorted(per_type)],
                   width=width, label=name)
            offset += width
        ax.set_xticks(np.arange(len(per_type)))
        ax.set_xticklabels(sorted(per_type))
        ax.set_ylabel("TDR")
        ax.set_xlabel("attack type")
        ax.legend()
        fig.savefig(plots / "per_type_tdr.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        made.append(plots / "per_type_tdr.png")

    sim_path = out / "similarity.csv"
    if sim_path.exists():
        rows = list(_csv.reader(open(sim_path)))
        names = rows[0][1:]
        matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=90, fontsize=7)
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize=7)
        fig.colorbar(im)
        fig.savefig(plots / "similarity.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        made.append(plots / "similarity.png")
    return made


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cluster": cmd_cluster,
    "pipeline": cmd_pipeline,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "unseen": cmd_unseen,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ufad",
        description="Unified multi-attack face detection on a synthetic "
                    "benchmark.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", type=str, default=None,
                       help="YAML/JSON experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config master seed")
        p.add_argument("--out", type=str, default=None,
                       help="override the config output directory")
        p.add_argument("--resume", action="store_true",
                       help="reuse persisted artifacts with a matching "
                            "config hash")
        if name == "synth":
            p.add_argument("--cache", action="store_true",
                           help="also write raw tensor caches per split")
        if name == "eval":
            p.add_argument("--ckpt", type=str, required=True,
                           help="checkpoint to evaluate")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _apply_thread_cap()
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - uniform CLI failure surface
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
