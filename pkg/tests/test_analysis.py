import json

import numpy as np
import pytest

from ergflow.analysis import (
    CertaintyProfile,
    certainty_fractions,
    certainty_profile,
    decomposition_trace,
    export_certainty_profile,
    export_decomposition_trace,
    export_variance_report,
    profile_from_captures,
    variance_study,
)
from ergflow.guidance import ErgParams, GuidanceSpec
from ergflow.sampler import SamplerConfig, Trajectory, euler_sample
from ergflow.tensor import Tensor

PROMPT = np.array([1, 2, 10, 13, 0, 0])
PROMPT_B = np.array([1, 5, 11, 14, 0, 0])


class TestVarianceStudy:
    def test_constant_model_has_zero_variance(self, tiny_model):
        def const_forward(x, t, cond, mdl):
            return Tensor(np.ones(x.shape, dtype=np.float32))

        report = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=4,
                                forward=const_forward)
        for series in list(report.marginal.values()) + list(report.conditional.values()):
            assert np.all(series.values == 0.0)

    def test_identity_model_has_unit_marginal_variance(self, tiny_model):
        def identity_forward(x, t, cond, mdl):
            return x

        report = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=10_000,
                                forward=identity_forward)
        assert np.allclose(report.marginal["null"].values, 1.0, atol=0.05)
        # conditional branch differences vanish for an input-only model
        assert np.all(report.conditional["null"].values == 0.0)

    def test_tau_one_conditional_variance_is_zero(self, tiny_model):
        erg = ErgParams(tau_c=1.0)
        report = variance_study(tiny_model, erg, [PROMPT, PROMPT_B], n_seeds=3)
        assert np.all(report.conditional["rectified"].values == 0.0)
        assert np.any(report.conditional["null"].values > 0.0)

    def test_histogram_mass_equals_location_count(self, tiny_model):
        report = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=3)
        for series in report.marginal.values():
            assert series.hist_counts.sum() == series.values.size
            assert len(series.hist_counts) == 50

    def test_doubling_seeds_is_consistent(self, tiny_model):
        r1 = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=64)
        r2 = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=128)
        v1, v2 = r1.marginal["null"].values, r2.marginal["null"].values
        # variance-of-variance for gaussians ~ 2 sigma^4 / (n-1)
        se = np.sqrt(2.0 / 63) * np.maximum(v1, 1e-12)
        assert np.mean(np.abs(v1 - v2) < 3 * se + 1e-12) > 0.9

    def test_requires_two_seeds(self, tiny_model):
        with pytest.raises(ValueError, match="2 seeds"):
            variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=1)

    def test_edges_do_not_depend_on_seed_count(self, tiny_model):
        r1 = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=2)
        r2 = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=4)
        assert len(r1.marginal["null"].hist_edges) == len(r2.marginal["null"].hist_edges)


class TestDecompositionTrace:
    def _traj(self, pos, neg):
        n = len(pos)
        return Trajectory(times=np.arange(n + 1) / n,
                          states=[], pos_velocities=pos, neg_velocities=neg)

    def test_orthogonal_difference(self):
        vp = np.array([1.0, 0.0], dtype=np.float32)
        vn = vp - np.array([0.0, 1.0], dtype=np.float32)  # d = (0, 1) orthogonal
        trace = decomposition_trace(self._traj([vp], [vn]))
        assert trace.parallel_norms[0] == pytest.approx(0.0, abs=1e-7)
        assert trace.orthogonal_norms[0] == pytest.approx(1.0, abs=1e-6)

    def test_parallel_difference(self):
        vp = np.array([2.0, 0.0], dtype=np.float32)
        vn = vp - 3 * vp
        trace = decomposition_trace(self._traj([vp], [vn]))
        assert trace.orthogonal_norms[0] == pytest.approx(0.0, abs=1e-6)

    def test_hand_projection(self):
        vp = np.array([1.0, 0.0], dtype=np.float32)
        vn = vp - np.array([1.0, 1.0], dtype=np.float32)
        trace = decomposition_trace(self._traj([vp], [vn]))
        assert trace.parallel_norms[0] == pytest.approx(1.0, abs=1e-6)
        assert trace.orthogonal_norms[0] == pytest.approx(1.0, abs=1e-6)

    def test_zero_positive_flagged(self):
        vp = np.zeros(3, dtype=np.float32)
        vn = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        trace = decomposition_trace(self._traj([vp], [vn]))
        assert trace.zero_positive_steps == (0,)
        assert trace.parallel_norms[0] == 0.0

    def test_pythagoras_on_recorded_trajectory(self, tiny_model):
        cfg = SamplerConfig(steps=20, seed=4, batch=2, record_trajectory=True)
        _, traj = euler_sample(tiny_model, GuidanceSpec(method="erg", w=3.0), PROMPT, cfg)
        trace = decomposition_trace(traj)
        lhs = trace.parallel_norms**2 + trace.orthogonal_norms**2
        np.testing.assert_allclose(lhs, trace.diff_norms**2, atol=1e-4, rtol=1e-4)

    def test_missing_velocities_rejected(self):
        with pytest.raises(ValueError, match="recorded"):
            decomposition_trace(Trajectory(times=np.array([0.0, 1.0])))


class TestCertaintyProfile:
    def test_injected_identity_attention(self):
        # one-hot rows: every query attends to exactly one key
        probs = np.zeros((2, 3, 4, 4), dtype=np.float32)
        probs[..., 0] = 1.0
        assert certainty_fractions(probs, 0.95) == 1.0

    def test_injected_uniform_attention(self):
        probs = np.full((1, 2, 6, 6), 1.0 / 6.0, dtype=np.float32)
        assert certainty_fractions(probs, 0.95) == 0.0

    def test_mixed_rows_counted(self):
        probs = np.full((1, 1, 2, 4), 0.25, dtype=np.float32)
        probs[0, 0, 0] = [0.99, 0.003, 0.003, 0.004]
        assert certainty_fractions(probs, 0.95) == 0.5

    def test_profile_from_captures_per_block(self):
        hot = np.zeros((1, 1, 3, 3), dtype=np.float32)
        hot[..., 1] = 1.0
        flat = np.full((1, 1, 3, 3), 1 / 3, dtype=np.float32)
        profile = profile_from_captures([hot, flat], 0.95)
        np.testing.assert_array_equal(profile.fractions, [1.0, 0.0])

    def test_profile_on_random_model_in_range(self, tiny_model):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
        profile = certainty_profile(tiny_model, x, 0.3)
        assert profile.fractions.shape == (tiny_model.denoiser.depth,)
        assert np.all(profile.fractions >= 0) and np.all(profile.fractions <= 1)

    def test_batch_permutation_invariance(self, tiny_model):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 1, 8, 8)).astype(np.float32)
        a = certainty_profile(tiny_model, Tensor(x), 0.3).fractions
        b = certainty_profile(tiny_model, Tensor(x[::-1].copy()), 0.3).fractions
        np.testing.assert_array_equal(a, b)

    def test_threshold_validation(self):
        with pytest.raises(ValueError, match="threshold"):
            certainty_fractions(np.ones((1, 1, 1, 1)), 1.5)


class TestExports:
    def test_variance_export(self, tiny_model, tmp_path):
        report = variance_study(tiny_model, ErgParams(), [PROMPT], n_seeds=3)
        csv_path, json_path = export_variance_report(report, tmp_path / "var")
        header = open(csv_path).readline().strip().split(",")
        assert header[0] == "index" and "marginal_null" in header
        payload = json.load(open(json_path))
        assert {"min", "median", "max"} <= set(payload["summary"]["marginal_null"])
        assert len(payload["histograms"]["conditional_rectified"]["counts"]) == 50

    def test_decomposition_export(self, tiny_model, tmp_path):
        cfg = SamplerConfig(steps=6, seed=4, batch=1, record_trajectory=True)
        _, traj = euler_sample(tiny_model, GuidanceSpec(method="erg", w=3.0), PROMPT, cfg)
        trace = decomposition_trace(traj)
        csv_path, json_path = export_decomposition_trace(trace, tmp_path / "dec")
        assert "parallel" in open(csv_path).readline()
        assert "summary" in json.load(open(json_path))

    def test_certainty_export(self, tmp_path):
        profile = CertaintyProfile(fractions=np.array([0.5, 1.0]), threshold=0.95)
        csv_path, json_path = export_certainty_profile(profile, tmp_path / "cert")
        rows = open(csv_path).read().splitlines()
        assert rows[0] == "index,fraction"
        assert json.load(open(json_path))["threshold"] == 0.95
