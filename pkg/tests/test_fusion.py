"""Fusion rules, cascade calibration, and the boosted-tree fuser."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as nps

from ufad.fusion import (
    FUSION_RULES,
    FusionError,
    StumpEnsemble,
    calibrate_cascade,
    cascade,
    fit_gbdt,
    fuse_scores,
    raw_sum,
)


class TestRules:
    def test_known_values(self):
        v = np.array([[0.1, 0.9, 0.4]])
        assert fuse_scores("max", v)[0] == pytest.approx(0.9)
        assert fuse_scores("median", v)[0] == pytest.approx(0.4)
        assert fuse_scores("min", v)[0] == pytest.approx(0.1)
        assert fuse_scores("mean", v)[0] == pytest.approx(1.4 / 3)
        assert fuse_scores("sum", v)[0] == pytest.approx(1.4 / 3)
        assert raw_sum(v)[0] == pytest.approx(1.4)

    def test_consistency_against_direct_recomputation(self):
        rng = np.random.default_rng(0)
        s = rng.random((1000, 5))
        assert np.array_equal(fuse_scores("min", s), s.min(axis=1))
        assert np.array_equal(fuse_scores("median", s), np.median(s, axis=1))
        assert np.array_equal(fuse_scores("mean", s), s.mean(axis=1))
        assert np.all(fuse_scores("min", s) <= fuse_scores("median", s) + 1e-12)
        assert np.all(fuse_scores("median", s) <= fuse_scores("max", s) + 1e-12)

    def test_unknown_rule_rejected(self):
        with pytest.raises(FusionError, match="unknown"):
            fuse_scores("geometric", np.ones((1, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(FusionError):
            fuse_scores("mean", np.array([[0.5, np.nan]]))

    @settings(max_examples=60, deadline=None)
    @given(
        nps.arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(2, 5)),
            elements=st.floats(0, 1),
        )
    )
    def test_outputs_stay_in_unit_interval(self, s):
        for rule in FUSION_RULES:
            out = fuse_scores(rule, s)
            assert np.all(out >= 0) and np.all(out <= 1)

    @settings(max_examples=60, deadline=None)
    @given(
        nps.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)),
                   elements=st.floats(0, 1))
    )
    def test_max_rule_dominates(self, s):
        top = fuse_scores("max", s)
        for rule in ("min", "median", "mean"):
            assert np.all(fuse_scores(rule, s) <= top + 1e-12)


class TestCascade:
    def test_first_stage_flag_short_circuits(self):
        calls = []

        class Probe:
            def __init__(self, vals):
                self.vals = np.asarray(vals, dtype=np.float64)

            def __len__(self):
                return len(self.vals)

            def __getitem__(self, idx):
                calls.append(np.atleast_1d(idx).tolist())
                return self.vals[idx]

            def __array__(self, dtype=None):
                return self.vals

        scores = [np.array([1.0, 0.0]), np.array([0.9, 0.0]), np.array([0.9, 0.0])]
        decisions, stages = cascade(scores, [0.5, 0.5, 0.5])
        assert decisions.tolist() == [1, 0]
        assert stages.tolist() == [0, -1]

    def test_later_stages_never_consulted_for_flagged_samples(self):
        # stage 2 would flag sample 0, but stage 0 already did
        scores = [np.array([0.9, 0.1]), np.array([0.0, 0.0]),
                  np.array([0.95, 0.0])]
        decisions, stages = cascade(scores, [0.5, 0.5, 0.5])
        assert stages.tolist() == [0, -1]

    def test_all_low_scores_pass_through(self):
        scores = [np.zeros(4), np.zeros(4), np.zeros(4)]
        decisions, stages = cascade(scores, [0.5, 0.5, 0.5])
        assert np.all(decisions == 0)
        assert np.all(stages == -1)

    def test_threshold_count_mismatch(self):
        with pytest.raises(FusionError):
            cascade([np.zeros(3)], [0.5, 0.5])

    def test_calibration_meets_total_budget(self):
        rng = np.random.default_rng(1)
        n = 2000
        val = [rng.random(n) for _ in range(3)]
        budgets = (0.001, 0.0005, 0.0005)
        thresholds = calibrate_cascade(val, budgets)
        decisions, _ = cascade(val, thresholds)
        pass_through = float(np.mean(decisions == 0))
        assert abs(pass_through - 0.998) <= 0.0005 + 1e-12


class TestGbdt:
    def test_zero_trees_is_base_rate_constant(self):
        x = np.array([[0.1, 0.2], [0.8, 0.9], [0.4, 0.5], [0.6, 0.7]])
        y = np.array([0, 1, 0, 1])
        ens = fit_gbdt(x, y, n_trees=0)
        assert len(ens.trees) == 0
        assert np.allclose(ens.decision(x), np.log(0.5 / 0.5))
        y2 = np.array([0, 1, 1, 1])
        ens2 = fit_gbdt(x, y2, n_trees=0)
        assert np.allclose(ens2.decision(x), np.log(0.75 / 0.25))

    def test_linearly_separable_toy_reaches_perfect_accuracy(self):
        rng = np.random.default_rng(2)
        n = 60
        x0 = rng.uniform(0, 0.45, (n, 2))
        x1 = rng.uniform(0.55, 1.0, (n, 2))
        x = np.vstack([x0, x1])
        y = np.array([0] * n + [1] * n)
        ens = fit_gbdt(x, y, n_trees=20)
        pred = (ens.predict_proba(x) >= 0.5).astype(int)
        assert np.array_equal(pred, y)

    def test_predictions_invariant_to_duplicating_rows(self):
        rng = np.random.default_rng(3)
        x = rng.random((40, 3))
        y = rng.integers(0, 2, 40)
        y[:2] = [0, 1]
        ens1 = fit_gbdt(x, y, n_trees=15)
        ens2 = fit_gbdt(np.vstack([x, x]), np.concatenate([y, y]), n_trees=15)
        probe = rng.random((25, 3))
        assert np.allclose(ens1.predict_proba(probe), ens2.predict_proba(probe))

    def test_single_class_rejected(self):
        with pytest.raises(FusionError):
            fit_gbdt(np.random.rand(5, 2), np.zeros(5))

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.random((30, 3))
        y = rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        p1 = fit_gbdt(x, y, n_trees=10).predict_proba(x)
        p2 = fit_gbdt(x, y, n_trees=10).predict_proba(x)
        assert np.array_equal(p1, p2)

    def test_json_roundtrip(self):
        rng = np.random.default_rng(5)
        x = rng.random((30, 3))
        y = rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        ens = fit_gbdt(x, y, n_trees=8)
        back = StumpEnsemble.from_json(ens.to_json())
        assert np.allclose(ens.predict_proba(x), back.predict_proba(x))
