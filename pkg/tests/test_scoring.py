"""Tests for scoring rules: frozen values, propriety, aggregation."""

import numpy as np
import pytest

from mapc.scoring import (
    ScoreReport,
    cumulative_mean_dss,
    dss,
    empirical_coverage,
    mse,
)


class TestDss:
    def test_perfect_point_forecast_unit_sd_scores_zero(self):
        assert dss(5.0, 5.0, 1.0) == pytest.approx(0.0)

    def test_frozen_value(self):
        # ((10-8)/2)^2 + 2 log 2
        assert dss(10.0, 8.0, 2.0) == pytest.approx(1.0 + 2.0 * np.log(2.0))

    def test_elementwise_arrays(self):
        y = np.array([10.0, 5.0])
        mu = np.array([8.0, 5.0])
        sd = np.array([2.0, 1.0])
        np.testing.assert_allclose(dss(y, mu, sd), [1 + 2 * np.log(2), 0.0])

    def test_rejects_nonpositive_sd(self):
        with pytest.raises(ValueError):
            dss(1.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            dss(np.ones(3), np.ones(3), np.array([1.0, -1.0, 2.0]))

    def test_minimized_at_sd_equal_absolute_error(self):
        # for fixed |y - mu| = d, the score is minimal at sd = d
        d = 3.0
        grid = np.linspace(0.5, 10.0, 400)
        scores = dss(np.full_like(grid, d), 0.0, grid)
        assert abs(grid[np.argmin(scores)] - d) < 0.05

    @pytest.mark.parametrize("mu0,sd0", [(0.0, 1.0), (3.0, 2.5)])
    def test_proper_for_gaussian_predictives(self, mu0, sd0):
        # expected DSS under y ~ N(mu0, sd0^2) has the closed form
        # ((mu0-mu)^2 + sd0^2)/sd^2 + 2 log sd, minimized at (mu0, sd0)
        mus = np.linspace(mu0 - 2, mu0 + 2, 41)
        sds = np.linspace(0.5 * sd0, 2.0 * sd0, 41)
        M, S = np.meshgrid(mus, sds, indexing="ij")
        expected = ((mu0 - M) ** 2 + sd0**2) / S**2 + 2 * np.log(S)
        i, j = np.unravel_index(np.argmin(expected), expected.shape)
        assert mus[i] == pytest.approx(mu0, abs=1e-9)
        assert sds[j] == pytest.approx(sd0, abs=0.05 * sd0)

    def test_finite_for_finite_inputs(self):
        rng = np.random.default_rng(0)
        vals = dss(rng.normal(size=100), rng.normal(size=100),
                   rng.uniform(0.01, 10, size=100))
        assert np.all(np.isfinite(vals))


class TestMse:
    def test_zero_when_exact(self):
        assert mse(np.arange(5.0), np.arange(5.0)) == 0.0

    def test_frozen_value(self):
        assert mse(np.array([1.0, 3.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=20)
        m = rng.normal(size=20)
        p = rng.permutation(20)
        assert mse(y, m) == pytest.approx(mse(y[p], m[p]))

    def test_errors(self):
        with pytest.raises(ValueError):
            mse(np.array([]), np.array([]))
        with pytest.raises(ValueError):
            mse(np.ones(3), np.ones(4))


class TestCoverage:
    def test_unbounded_intervals_cover_everything(self):
        y = np.array([1.0, 100.0, -5.0])
        assert empirical_coverage(y, np.full(3, -np.inf), np.full(3, np.inf)) == 1.0

    def test_observations_above_upper_never_covered(self):
        y = np.array([10.0, 20.0])
        assert empirical_coverage(y, np.zeros(2), np.array([5.0, 15.0])) == 0.0

    def test_bounds_inclusive(self):
        y = np.array([2.0, 3.0])
        assert empirical_coverage(y, np.array([2.0, 0.0]), np.array([5.0, 3.0])) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            empirical_coverage(np.ones(2), np.ones(3), np.ones(2))
        with pytest.raises(ValueError):
            empirical_coverage(np.ones(2), np.array([2.0, 0.0]), np.array([1.0, 3.0]))
        with pytest.raises(ValueError):
            empirical_coverage(np.array([]), np.array([]), np.array([]))


class TestCumulativeMeanDss:
    def test_constant_scores_give_flat_curve(self):
        grid = np.full((4, 6), 2.5)
        np.testing.assert_allclose(cumulative_mean_dss(grid), np.full(6, 2.5))

    def test_frozen_arithmetic(self):
        # per-period means (1, 3) -> curve (1, 2)
        grid = np.array([[0.0, 2.0], [2.0, 4.0]])
        np.testing.assert_allclose(cumulative_mean_dss(grid), [1.0, 2.0])

    def test_final_value_equals_overall_mean(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(5, 9))
        curve = cumulative_mean_dss(grid)
        assert curve[-1] == pytest.approx(grid.mean())

    def test_rejects_non_grid(self):
        with pytest.raises(ValueError):
            cumulative_mean_dss(np.ones(5))


class TestScoreReport:
    def test_aggregates_match_recomputation(self):
        rng = np.random.default_rng(3)
        y = rng.poisson(50, size=(4, 6)).astype(float)
        mu = y + rng.normal(size=(4, 6))
        sd = rng.uniform(1.0, 3.0, size=(4, 6))
        intervals = {0.8: (mu - 2 * sd, mu + 2 * sd)}
        rep = ScoreReport.build(y, mu, sd, intervals)
        np.testing.assert_allclose(rep.dss_cells, dss(y, mu, sd))
        assert rep.mean_dss == pytest.approx(rep.dss_cells.mean())
        assert rep.mse == pytest.approx(mse(y, mu))
        assert rep.coverage[0.8] == pytest.approx(
            empirical_coverage(y, mu - 2 * sd, mu + 2 * sd)
        )
        np.testing.assert_allclose(rep.per_period_dss, rep.dss_cells.mean(axis=0))
        np.testing.assert_allclose(
            rep.cumulative_dss, cumulative_mean_dss(rep.dss_cells)
        )
        assert rep.cumulative_dss[-1] == pytest.approx(rep.mean_dss)

    def test_coverage_bounds(self):
        y = np.array([[1.0, 2.0]])
        rep = ScoreReport.build(
            y, y, np.ones_like(y), {0.5: (y - 1, y + 1), 0.9: (y + 1, y + 2)}
        )
        assert rep.coverage[0.5] == 1.0
        assert rep.coverage[0.9] == 0.0
