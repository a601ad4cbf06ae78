import numpy as np
import pytest

from gt2cal.calibration import (
    CalibrationTable,
    SearchConfig,
    alpha_grid,
    build_lookup_table,
    calibrate_search,
    coverage_at_alpha,
    export_calibration_curve,
    lookup_alpha,
    picp,
    pinaw,
    read_calibration_curve,
    search_alpha,
    _isotonic_decreasing,
)
from gt2cal.errors import FlatCurveError

from conftest import random_model


def linear_coverage(alpha):
    """Analytic stand-in for an empirical coverage curve: monotone linear
    from 0.99 at the bottom slice down to 0.50 at alpha = 1."""
    return 0.99 - 0.49 * (alpha - 0.01) / 0.99


class TestPicp:
    def test_two_of_three_covered(self):
        val = picp(np.array([1.0, 2.0, 3.0]),
                   np.array([0.0, 0.0, 4.0]),
                   np.array([2.0, 3.0, 5.0]))
        assert val == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_all_inside(self):
        y = np.array([0.5, -1.0])
        assert picp(y, y - 1, y + 1) == 1.0

    def test_boundary_counts_as_covered(self):
        y = np.array([2.0])
        assert picp(y, np.array([2.0]), np.array([3.0])) == 1.0
        assert picp(y, np.array([1.0]), np.array([2.0])) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            picp(np.array([]), np.array([]), np.array([]))

    def test_values_are_multiples_of_reciprocal_count(self, rng):
        for _ in range(10):
            q = int(rng.integers(1, 40))
            y = rng.normal(size=q)
            lo = y - rng.random(q)
            hi = y + rng.random(q) - 0.5
            val = picp(y, lo, hi)
            assert (val * q) == pytest.approx(round(val * q), abs=1e-9)


class TestPinaw:
    def test_constant_width(self):
        y = np.array([0.0, 4.0])
        assert pinaw(y, y - 0.5, y + 0.5) == pytest.approx(1.0 / 4.0)

    def test_zero_width(self):
        y = np.array([0.0, 1.0, 2.0])
        assert pinaw(y, y, y) == 0.0

    def test_mixed_widths(self):
        y = np.array([0.0, 4.0])
        lo = np.array([0.0, 0.0])
        hi = np.array([1.0, 3.0])
        assert pinaw(y, lo, hi) == pytest.approx(0.5, abs=1e-12)

    def test_degenerate_range_rejected(self):
        y = np.array([1.0, 1.0])
        with pytest.raises(ValueError):
            pinaw(y, y - 1, y + 1)


class TestCoverageAtAlpha:
    def test_monotone_in_alpha(self, rng):
        m = random_model(rng, n_rules=5, n_inputs=2)
        X = rng.normal(size=(300, 2))
        y = rng.normal(size=300)
        assert coverage_at_alpha(m, X, y, 0.2) >= coverage_at_alpha(m, X, y, 0.8)

    def test_collapsed_interval_covers_nothing(self, rng):
        from gt2cal.core import ModelParams
        m = random_model(rng, n_rules=4, n_inputs=2)
        tight = ModelParams(c=m.c, sigma=m.sigma,
                            sigma_l=np.full(2, 1e-12), sigma_r=np.full(2, 1e-12),
                            a=m.a, a0=m.a0)
        X = rng.normal(size=(200, 2))
        y = rng.normal(size=200)  # continuous targets never hit a point interval
        assert coverage_at_alpha(tight, X, y, 1.0) == 0.0


class TestIsotonicRepair:
    def test_already_monotone_unchanged(self):
        v = np.array([0.9, 0.7, 0.5, 0.2])
        np.testing.assert_array_equal(_isotonic_decreasing(v), v)

    def test_single_violation_pooled(self):
        v = np.array([0.9, 0.5, 0.6, 0.2])
        out = _isotonic_decreasing(v)
        np.testing.assert_allclose(out, [0.9, 0.55, 0.55, 0.2])
        assert np.all(np.diff(out) <= 0)

    def test_random_inputs_non_increasing(self, rng):
        for _ in range(50):
            v = rng.random(int(rng.integers(2, 15)))
            out = _isotonic_decreasing(v)
            assert np.all(np.diff(out) <= 1e-15)
            assert out.sum() == pytest.approx(v.sum(), abs=1e-9)


class TestAlphaGrid:
    def test_tenth_step(self):
        grid = alpha_grid(0.1)
        np.testing.assert_allclose(
            grid, [0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])

    def test_half_step(self):
        np.testing.assert_allclose(alpha_grid(0.5), [0.01, 0.5, 1.0])

    def test_invalid_step(self):
        for bad in (0.0, 1.0, -0.1, 2.0):
            with pytest.raises(ValueError):
                alpha_grid(bad)


class TestLookupTable:
    def test_phi_column_non_increasing_after_repair(self, rng):
        m = random_model(rng, n_rules=5, n_inputs=2)
        X = rng.normal(size=(150, 2))
        y = rng.normal(size=150)
        table = build_lookup_table(m, X, y, delta=0.1)
        assert len(table) == 11
        assert np.all(np.diff(table.phis) <= 0)

    def test_two_point_interpolation(self):
        table = CalibrationTable(alphas=np.array([0.01, 1.0]),
                                 phis=np.array([0.99, 0.50]))
        res = lookup_alpha(table, 0.745)
        assert res.alpha_star == pytest.approx(0.505, abs=1e-12)
        assert not res.out_of_range

    def test_knot_hit_returns_grid_alpha(self):
        table = CalibrationTable(alphas=np.array([0.01, 0.4, 1.0]),
                                 phis=np.array([0.95, 0.6, 0.1]))
        assert lookup_alpha(table, 0.6).alpha_star == pytest.approx(0.4)

    def test_out_of_range_clamps_with_flag(self):
        table = CalibrationTable(alphas=np.array([0.01, 1.0]),
                                 phis=np.array([0.9, 0.4]))
        high = lookup_alpha(table, 0.95)
        assert high.alpha_star == 0.01 and high.out_of_range
        low = lookup_alpha(table, 0.1)
        assert low.alpha_star == 1.0 and low.out_of_range

    def test_flat_table_cannot_invert(self):
        table = CalibrationTable(alphas=np.array([0.01, 0.5, 1.0]),
                                 phis=np.array([0.7, 0.7, 0.7]))
        with pytest.raises(FlatCurveError):
            lookup_alpha(table, 0.6)

    def test_flat_run_resolves_to_largest_alpha(self):
        table = CalibrationTable(alphas=np.array([0.01, 0.3, 0.6, 1.0]),
                                 phis=np.array([0.9, 0.7, 0.7, 0.2]))
        assert lookup_alpha(table, 0.7).alpha_star == pytest.approx(0.6)

    def test_rejects_bad_grids(self):
        with pytest.raises(ValueError):
            CalibrationTable(alphas=np.array([0.5, 0.5]), phis=np.array([1, 0]))
        with pytest.raises(ValueError):
            CalibrationTable(alphas=np.array([0.001, 0.5]), phis=np.array([1, 0]))
        with pytest.raises(ValueError):
            CalibrationTable(alphas=np.array([0.5]), phis=np.array([1.0]))


class TestCurveExport:
    def test_roundtrip(self, tmp_path, rng):
        m = random_model(rng, n_rules=4, n_inputs=2)
        X = rng.normal(size=(100, 2))
        y = rng.normal(size=100)
        table = build_lookup_table(m, X, y, delta=0.1)
        path = tmp_path / "curve.csv"
        export_calibration_curve(table, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "alpha,phi"
        assert len(lines) == 12  # header + 11 grid rows
        back = read_calibration_curve(path)
        np.testing.assert_array_equal(back.alphas, table.alphas)
        np.testing.assert_array_equal(back.phis, table.phis)

    def test_written_phi_non_increasing(self, tmp_path, rng):
        m = random_model(rng, n_rules=3, n_inputs=2)
        X = rng.normal(size=(60, 2))
        y = rng.normal(size=60)
        table = build_lookup_table(m, X, y, delta=0.25)
        path = tmp_path / "curve.csv"
        export_calibration_curve(table, path)
        phis = [float(l.split(",")[1]) for l in
                path.read_text().strip().splitlines()[1:]]
        assert np.all(np.diff(phis) <= 0)


class TestSearch:
    def test_converges_on_analytic_curve(self):
        cfg = SearchConfig(phi_d=0.90, alpha_init=0.5, delta=0.25,
                           gamma=0.5, epsilon=1e-3)
        res = search_alpha(linear_coverage, cfg)
        assert res.converged
        assert abs(res.phi_achieved - 0.90) < 1e-3
        assert res.iterations <= 100

    def test_zero_iterations_when_already_at_target(self):
        phi0 = linear_coverage(0.5)
        cfg = SearchConfig(phi_d=phi0, alpha_init=0.5, epsilon=1e-6)
        res = search_alpha(linear_coverage, cfg)
        assert res.iterations == 0
        assert res.converged
        assert res.alpha_star == 0.5

    def test_unreachable_target_stops_at_boundary(self):
        # nothing below phi(1) = 0.50 is reachable
        cfg = SearchConfig(phi_d=0.30, alpha_init=0.5, epsilon=1e-3)
        res = search_alpha(linear_coverage, cfg)
        assert not res.converged
        assert res.alpha_star == pytest.approx(1.0, abs=1e-6)
        assert res.phi_achieved == pytest.approx(0.50, abs=1e-6)

    def test_error_non_increasing_over_accepted_moves(self):
        # truncating the deterministic search at growing iteration caps
        # exposes the best-so-far error after each iteration
        errors = []
        for cap in range(1, 30):
            cfg = SearchConfig(phi_d=0.8, alpha_init=0.99, delta=0.25,
                               gamma=0.5, epsilon=1e-9, max_iters=cap)
            res = search_alpha(linear_coverage, cfg)
            errors.append(abs(res.phi_achieved - 0.8))
        assert all(b <= a + 1e-15 for a, b in zip(errors, errors[1:]))

    def test_requires_explicit_tolerance(self):
        cfg = SearchConfig(phi_d=0.9)
        with pytest.raises(ValueError):
            search_alpha(linear_coverage, cfg)

    def test_rejects_bad_configs(self):
        for kw in ({"phi_d": 0.99}, {"phi_d": 0.0},
                   {"phi_d": 0.9, "gamma": 1.0},
                   {"phi_d": 0.9, "alpha_init": 0.001},
                   {"phi_d": 0.9, "epsilon": 0.0}):
            with pytest.raises(ValueError):
                SearchConfig(**kw)

    def test_many_random_targets_converge(self, rng):
        for _ in range(20):
            phi_d = float(rng.uniform(0.51, 0.98))
            cfg = SearchConfig(phi_d=phi_d, alpha_init=0.5, delta=0.25,
                               gamma=0.5, epsilon=1e-3)
            res = search_alpha(linear_coverage, cfg)
            assert res.converged and abs(res.phi_achieved - phi_d) <= 1e-3


@pytest.fixture(scope="module")
def wide_envelope_fit():
    """A quick 99%-envelope fit on the synthetic task, z-scored."""
    from gt2cal.harness import synthetic_heteroscedastic
    from gt2cal.training import TrainConfig, train

    X, y = synthetic_heteroscedastic(1200, seed=8)
    Xz = (X - X.mean(0)) / X.std(0)
    yz = (y - y.mean()) / y.std()
    cfg = TrainConfig.for_coverage(0.99, n_rules=5, epochs=200, seed=8)
    fitted = train(Xz, yz, cfg)
    return fitted.params, Xz, yz


class TestTrainedModelCoverage:
    def test_bottom_slice_coverage_near_training_target(self, wide_envelope_fit):
        params, Xz, yz = wide_envelope_fit
        cov = coverage_at_alpha(params, Xz, yz, 0.01)
        assert abs(cov - 0.99) <= 0.03


class TestSearchOnModel:
    def test_search_and_lookup_agree(self, rng):
        # synthetic "coverage curve" of an untrained random model is still
        # monotone, which is all the agreement property needs
        m = random_model(rng, n_rules=6, n_inputs=2)
        X = rng.normal(size=(400, 2))
        y = 0.5 * rng.normal(size=400)
        phis = build_lookup_table(m, X, y, delta=0.01)
        target = float(np.quantile(phis.phis, 0.5))
        if not 0.0 < target < 0.99:
            pytest.skip("random model's coverage range misses usable targets")
        res_search = calibrate_search(m, X, y, SearchConfig(phi_d=target))
        res_lookup = lookup_alpha(phis, target)
        cov_search = coverage_at_alpha(m, X, y, res_search.alpha_star)
        cov_lookup = coverage_at_alpha(m, X, y, res_lookup.alpha_star)
        assert abs(cov_search - cov_lookup) <= 2.0 / 400
