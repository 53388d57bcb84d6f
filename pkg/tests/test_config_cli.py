"""Config parsing, hashing, CLI exit codes, pipeline persistence."""

import json
import hashlib
from pathlib import Path

import pytest
import yaml

from ufad.cli import main
from ufad.config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    from_tree,
    load_config,
    to_tree,
)
from ufad.pipeline import (
    fold_holdouts,
    report_without_volatile,
    run_pipeline,
)
from ufad.cluster import manual_partition

MICRO_TREE = {
    "dataset": {
        "image_size": 16,
        "num_types": 3,
        "bona_fide": {"train": 20, "val": 10, "test": 10},
        "attacks_per_type": {"train": 7, "val": 4, "test": 4},
    },
    "model": {"kind": "branched", "shared_depth": 2},
    "training": {"lr": 0.002, "batch": 8, "branch_batch": 6, "iters": 6,
                 "specialist_iters": 4},
    "partition": {"source": "kmeans", "n_clusters": 2, "restarts": 5},
    "fdr_target": 0.2,
    "master_seed": 3,
}


def _write_cfg(tmp_path, tree=None, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree if tree is not None else MICRO_TREE))
    return path


class TestConfigParsing:
    def test_round_trip(self, tmp_path):
        cfg = load_config(_write_cfg(tmp_path))
        assert cfg.dataset.image_size == 16
        assert cfg.partition.n_clusters == 2
        assert cfg.master_seed == 3

    def test_unknown_key_rejected_with_path(self):
        bad = dict(MICRO_TREE, training=dict(MICRO_TREE["training"], lrr=0.1))
        with pytest.raises(ConfigError, match="training.lrr"):
            from_tree(bad)

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="outdir"):
            from_tree({"outdir": "x"})

    def test_dataset_master_seed_rejected(self):
        bad = dict(MICRO_TREE,
                   dataset=dict(MICRO_TREE["dataset"], master_seed=4))
        with pytest.raises(ConfigError, match="master_seed"):
            from_tree(bad)

    def test_bad_enum_value_rejected(self):
        bad = dict(MICRO_TREE, model={"kind": "gigantic"})
        with pytest.raises(ConfigError, match="kind"):
            from_tree(bad)

    def test_lists_become_tuples(self):
        tree = dict(MICRO_TREE, sweep={"shared_depths": [0, 2, 4]})
        cfg = from_tree(tree)
        assert cfg.sweep.shared_depths == (0, 2, 4)

    def test_hash_is_stable_and_seed_sensitive(self, tmp_path):
        cfg1 = load_config(_write_cfg(tmp_path))
        cfg2 = load_config(_write_cfg(tmp_path, name="cfg2.yaml"))
        assert config_hash(cfg1) == config_hash(cfg2)
        assert config_hash(cfg1) != config_hash(cfg1.with_seed(99))

    def test_resolved_dataset_carries_master_seed(self):
        cfg = from_tree(MICRO_TREE)
        assert cfg.resolved_dataset().master_seed == 3
        assert cfg.with_seed(8).resolved_dataset().master_seed == 8

    def test_to_tree_round_trips(self):
        cfg = from_tree(MICRO_TREE)
        assert from_tree(to_tree(cfg)) == cfg


class TestFoldHoldouts:
    def test_balanced_three_per_cluster(self):
        p = manual_partition(list(range(9)),
                             [[0, 1, 2], [3, 4, 5], [6, 7, 8]])
        folds = fold_holdouts(p, 3)
        assert folds == [[0, 3, 6], [1, 4, 7], [2, 5, 8]]

    def test_singleton_clusters_never_held_out(self):
        p = manual_partition([0, 1, 2, 3], [[0], [1, 2, 3]])
        folds = fold_holdouts(p, 3)
        assert all(0 not in f for f in folds)
        # every fold keeps cluster 1 populated
        for f in folds:
            assert len(set(f) & {1, 2, 3}) < 3

    def test_every_type_held_out_at_most_once(self):
        p = manual_partition(list(range(7)), [[0, 1, 2, 3], [4, 5, 6]])
        folds = fold_holdouts(p, 3)
        flat = [t for f in folds for t in f]
        assert len(flat) == len(set(flat))


class TestCli:
    def test_synth_is_deterministic_across_runs(self, tmp_path):
        cfgp = _write_cfg(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", str(cfgp), "--out", str(out1)]) == 0
        assert main(["synth", "--config", str(cfgp), "--out", str(out2)]) == 0
        h1 = hashlib.sha256((out1 / "manifest.jsonl").read_bytes()).hexdigest()
        h2 = hashlib.sha256((out2 / "manifest.jsonl").read_bytes()).hexdigest()
        assert h1 == h2

    def test_synth_creates_missing_out_dir_and_cache(self, tmp_path):
        cfgp = _write_cfg(tmp_path)
        out = tmp_path / "deep" / "nested" / "dir"
        assert main(["synth", "--config", str(cfgp), "--out", str(out),
                     "--cache"]) == 0
        assert (out / "train.ufad").exists()

    def test_corrupt_config_exits_2(self, tmp_path, capsys):
        bad = dict(MICRO_TREE,
                   training=dict(MICRO_TREE["training"], momentum=0.9))
        cfgp = _write_cfg(tmp_path, bad)
        assert main(["synth", "--config", str(cfgp),
                     "--out", str(tmp_path / "x")]) == 2
        assert "training.momentum" in capsys.readouterr().err

    def test_invalid_dataset_value_exits_2(self, tmp_path):
        bad = dict(MICRO_TREE, dataset=dict(MICRO_TREE["dataset"],
                                            image_size=17))
        cfgp = _write_cfg(tmp_path, bad)
        assert main(["synth", "--config", str(cfgp),
                     "--out", str(tmp_path / "x")]) == 2

    def test_missing_checkpoint_exits_3(self, tmp_path):
        cfgp = _write_cfg(tmp_path)
        assert main(["eval", "--config", str(cfgp),
                     "--out", str(tmp_path / "x"),
                     "--ckpt", str(tmp_path / "missing.ckpt")]) == 3

    def test_pipeline_then_eval_and_report(self, tmp_path):
        cfgp = _write_cfg(tmp_path)
        out = tmp_path / "run"
        assert main(["pipeline", "--config", str(cfgp),
                     "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        for key in ("config_hash", "tool_version", "models", "partition",
                    "classification", "timing_seconds"):
            assert key in report
        for block in report["models"].values():
            assert {"overall_tdr", "accuracy", "per_type",
                    "per_category"} <= set(block)
        assert main(["eval", "--config", str(cfgp), "--out", str(out),
                     "--ckpt", str(out / "joint.ckpt")]) == 0
        assert main(["report", "--config", str(cfgp), "--out", str(out)]) == 0
        assert (out / "plots" / "roc.png").exists()


class TestPipeline:
    def test_resume_skips_retraining(self, tmp_path):
        cfg = from_tree(MICRO_TREE).with_out_dir(tmp_path / "run")
        _, info1 = run_pipeline(cfg, resume=True)
        assert info1["joint_reused"] is False
        _, info2 = run_pipeline(cfg, resume=True)
        assert info2["joint_reused"] is True
        assert info2["branched_reused"] is True

    def test_seed_change_invalidates_resume(self, tmp_path):
        cfg = from_tree(MICRO_TREE).with_out_dir(tmp_path / "run")
        run_pipeline(cfg, resume=True)
        _, info = run_pipeline(cfg.with_seed(4), resume=True)
        assert info["joint_reused"] is False

    def test_reports_byte_identical_across_runs(self, tmp_path):
        cfg = from_tree(MICRO_TREE)
        run_pipeline(cfg.with_out_dir(tmp_path / "r1"))
        run_pipeline(cfg.with_out_dir(tmp_path / "r2"))
        r1 = json.loads((tmp_path / "r1" / "report.json").read_text())
        r2 = json.loads((tmp_path / "r2" / "report.json").read_text())
        b1 = json.dumps(report_without_volatile(r1), sort_keys=True)
        b2 = json.dumps(report_without_volatile(r2), sort_keys=True)
        assert b1 == b2

    def test_report_embeds_config_hash_and_version(self, tmp_path):
        cfg = from_tree(MICRO_TREE).with_out_dir(tmp_path / "run")
        report, _ = run_pipeline(cfg)
        assert report["config_hash"] == config_hash(cfg)
        partition = json.loads((tmp_path / "run" / "partition.json").read_text())
        assert partition["config_hash"] == config_hash(cfg)
