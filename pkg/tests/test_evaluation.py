import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gasm.admm import AdmmParams
from gasm.evaluation import (
    coverage_sweep,
    evaluate,
    relative_error,
    speeds_from_pairs,
    wavespeed_sweep,
    write_table,
)
from gasm.grid import GridSpec, SpeedField, detector_mask
from gasm.pipeline import EstimationConfig, run_estimation
from gasm.synth import SyntheticSpec, WaveBand, generate_field


def small_truth():
    g = GridSpec(0.0, 0.0, 10.0, 2.0, 12, 40)
    band = WaveBand(start_x=100.0, start_t=20.0, speed=-15.0, half_width=25.0)
    return generate_field(SyntheticSpec(g, wave_segments=(band,), noise_std=2.0, seed=1))


G = GridSpec(0.0, 0.0, 1.0, 1.0, 3, 4)


class TestRelativeError:
    def test_identity(self):
        f = SpeedField(G, np.arange(1.0, 13.0).reshape(3, 4))
        assert relative_error(f, f) == 0.0

    def test_double(self):
        f = SpeedField(G, np.arange(1.0, 13.0).reshape(3, 4))
        assert relative_error(SpeedField(G, 2 * f.values), f) == pytest.approx(1.0, rel=1e-15)

    def test_zero_truth(self):
        z = SpeedField(G, np.zeros((3, 4)))
        with pytest.raises(ValueError, match="undefined relative error"):
            relative_error(z, z)

    def test_grid_mismatch(self):
        other = GridSpec(0.0, 0.0, 2.0, 1.0, 3, 4)
        with pytest.raises(ValueError):
            relative_error(SpeedField(G, np.ones((3, 4))), SpeedField(other, np.ones((3, 4))))

    @given(arrays(float, (3, 4), elements=st.floats(1, 100)), arrays(float, (3, 4), elements=st.floats(-5, 5)),
           st.floats(0, 10))
    def test_homogeneous_in_error(self, truth, err, alpha):
        t = SpeedField.unchecked(G, truth)
        base = relative_error(SpeedField.unchecked(G, truth + err), t)
        scaled = relative_error(SpeedField.unchecked(G, truth + alpha * err), t)
        assert scaled == pytest.approx(alpha * base, rel=1e-9, abs=1e-12)

    def test_regions(self):
        truth = SpeedField(G, np.array([[20.0, 80, 80, 80], [20, 80, 80, 80], [20, 80, 80, 80]]))
        est = SpeedField(G, truth.values + np.array([[2.0, 0, 0, 0]] * 3))
        rep = evaluate(est, truth)
        assert rep.per_region_errors["congested"] == pytest.approx(0.1)
        assert rep.per_region_errors["free"] == 0.0
        assert rep.cell_count == 12 and rep.negative_speed_cells == 0


class TestSweeps:
    def test_full_coverage_beats_sparse(self):
        truth = small_truth()
        cfg = EstimationConfig()
        for method in ("asm", "admm"):
            pts = coverage_sweep(truth, [2, truth.grid.n_x], method, cfg)
            assert [p.key for p in pts] == [2, truth.grid.n_x]
            assert pts[1].relative_error < pts[0].relative_error

    def test_repeated_counts_identical(self):
        pts = coverage_sweep(small_truth(), [2, 2], "admm", EstimationConfig(admm=AdmmParams(max_iters=200)))
        assert pts[0] == pts[1]

    def test_empty_counts(self):
        with pytest.raises(ValueError):
            coverage_sweep(small_truth(), [], "asm", EstimationConfig())

    def test_pair_order(self):
        assert speeds_from_pairs([(-15, 80), (-12.5, 70)]) == [80.0, -15.0, 70.0, -12.5]

    def test_single_pair_equals_direct_run(self):
        truth = small_truth()
        mask = detector_mask(truth.grid, [2, 9])
        cfg = EstimationConfig(admm=AdmmParams(max_iters=500))
        (pt,) = wavespeed_sweep(truth, mask, [(-15, 80)], cfg)
        direct = run_estimation(truth, mask, "admm", cfg)
        assert pt.key == 2
        assert pt.relative_error == relative_error(direct.field, truth)
        assert pt.objective == direct.admm.objective

    def test_duplicated_pair_not_worse(self):
        truth = small_truth()
        mask = detector_mask(truth.grid, [2, 9])
        cfg = EstimationConfig(admm=AdmmParams(max_iters=400_000))
        one, two = wavespeed_sweep(truth, mask, [(-15, 80), (-15, 80)], cfg)
        assert one.converged and two.converged
        assert two.objective <= one.objective + 1e-6 * max(1.0, one.objective)

    def test_empty_pairs(self):
        truth = small_truth()
        with pytest.raises(ValueError):
            wavespeed_sweep(truth, detector_mask(truth.grid, [2]), [], EstimationConfig())


def test_write_table(tmp_path):
    write_table(tmp_path / "t.tsv", ("a", "b", "c"), [(1, 0.1, None), ("x", np.float64(2.5), True)])
    assert (tmp_path / "t.tsv").read_text() == "a\tb\tc\n1\t0.1\t\nx\t2.5\tTrue\n"


class TestPipeline:
    def test_unknown_method(self):
        truth = small_truth()
        with pytest.raises(ValueError, match="method"):
            run_estimation(truth, detector_mask(truth.grid, [2]), "kriging", EstimationConfig())

    def test_asm_weights_sum_to_one(self):
        truth = small_truth()
        est = run_estimation(truth, detector_mask(truth.grid, [2, 9]), "asm", EstimationConfig())
        np.testing.assert_allclose(est.weights[0] + est.weights[1], 1.0, rtol=0, atol=1e-15)
        assert est.admm is None

    def test_admm_single_speed(self):
        truth = small_truth()
        cfg = EstimationConfig(wave_speeds=(-15.0,), admm=AdmmParams(eps_abs=1e-10, eps_rel=1e-10,
                                                                    max_iters=200_000))
        est = run_estimation(truth, detector_mask(truth.grid, [2, 9]), "admm", cfg)
        np.testing.assert_allclose(est.field.values, est.bank.fields[0].values, rtol=1e-6)
