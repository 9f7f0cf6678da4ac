"""Tests for predictive summaries, relative risks, and cross-prediction.

Moment arithmetic is checked against hand-computed mixtures and a
Monte-Carlo oracle; quantile inversion against exact Poisson CDFs;
cross-prediction against its degenerate in-sample case; and the
forecast distribution against the model's exact symmetry under
reversing both the age and period axes (which maps cohorts onto
reversed cohorts, so every prior is preserved).
"""

import numpy as np
import pytest
from scipy import stats

from mapc.forecast import (
    Band,
    CrossPredictionPlan,
    PredictiveSummary,
    forecast_period_order,
    predictive_moments,
    predictive_quantiles,
    predictive_summary,
    relative_risks,
    run_cross_prediction,
)
from mapc.model import ApcModelSpec, FamilyConfig, RegistryTable
from mapc.sampler import PosteriorSamples, SamplerConfig, run_chain


def one_cell_table(exposure=10.0, count=0):
    return RegistryTable(
        counts=np.array([[[count]]]),
        exposure=np.array([[[exposure]]]),
        observed=np.ones((1, 1, 1), dtype=bool),
        age_period_ratio=1,
    )


def manual_samples(table, log_rate_draws, spec=None):
    """PosteriorSamples whose eta comes entirely from intercept draws."""
    S = log_rate_draws.shape[0]
    I, J, R = table.n_ages, table.n_periods, table.n_strata
    K = table.n_cohorts
    spec = spec or ApcModelSpec()
    return PosteriorSamples(
        spec=spec,
        n_ages=I,
        n_periods=J,
        n_strata=R,
        n_cohorts=K,
        age_period_ratio=table.age_period_ratio,
        intercept=log_rate_draws.reshape(S, R),
        age=np.zeros((S, I)),
        period=np.zeros((S, J, R)),
        cohort=np.zeros((S, K, R)),
        overdispersion=np.zeros((S, I, J, R)),
        kappa={},
        rho_star={},
        chain_ids=np.zeros(S, dtype=int),
        acceptance={},
        clamp_events=0,
        diagnostics={},
    )


def poisson_table(I, J, R, seed=0, exposure=2e4, observed=None):
    rng = np.random.default_rng(seed)
    age = 0.3 * np.sin(np.linspace(0, 2, I))
    period = 0.3 * np.linspace(-0.5, 0.5, J)
    eta = -5.0 + age[:, None, None] + period[None, :, None]
    eta = np.broadcast_to(eta, (I, J, R))
    counts = rng.poisson(exposure * np.exp(eta))
    if observed is None:
        observed = np.ones((I, J, R), dtype=bool)
    return RegistryTable(
        counts=counts,
        exposure=np.full((I, J, R), exposure),
        observed=observed,
        age_period_ratio=1,
    )


class TestPredictiveMoments:
    def test_two_point_mixture(self):
        table = one_cell_table(exposure=10.0)
        samples = manual_samples(table, np.log([[1.0], [3.0]]))
        out = predictive_moments(samples, table)
        assert out.mean[0, 0, 0] == pytest.approx(20.0)
        assert out.sd[0, 0, 0] ** 2 == pytest.approx(120.0)
        assert out.rate_mean[0, 0, 0] == pytest.approx(2.0)
        assert out.rate_var[0, 0, 0] == pytest.approx(1.0)

    def test_degenerate_rate_is_pure_poisson(self):
        table = one_cell_table(exposure=7.0)
        samples = manual_samples(table, np.log([[2.0]]))
        out = predictive_moments(samples, table)
        assert out.mean[0, 0, 0] == pytest.approx(14.0)
        assert out.sd[0, 0, 0] ** 2 == pytest.approx(14.0)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(5)
        table = one_cell_table(exposure=50.0)
        lam = rng.lognormal(mean=-0.5, sigma=0.4, size=(200, 1))
        samples = manual_samples(table, np.log(lam))
        out = predictive_moments(samples, table)
        idx = rng.integers(0, 200, size=1_000_000)
        sim = rng.poisson(50.0 * lam[idx, 0])
        assert sim.mean() == pytest.approx(out.mean[0, 0, 0], rel=0.01)
        assert sim.var() == pytest.approx(out.sd[0, 0, 0] ** 2, rel=0.01)

    def test_variance_never_below_poisson(self):
        rng = np.random.default_rng(6)
        table = poisson_table(3, 4, 2)
        samples = manual_samples(
            table, np.log(rng.lognormal(-5.0, 0.3, size=(50, 2)))
        )
        out = predictive_moments(samples, table)
        assert np.all(out.sd**2 >= out.mean * (1 - 1e-9))

    def test_no_draws_rejected(self):
        table = one_cell_table()
        samples = manual_samples(table, np.empty((0, 1)))
        with pytest.raises(ValueError, match="no retained draws"):
            predictive_moments(samples, table)


class TestPredictiveQuantiles:
    def test_degenerate_poisson_median(self):
        table = one_cell_table(exposure=1.0)
        samples = manual_samples(table, np.log([[2.0]]))
        out = predictive_quantiles(samples, table, [0.5])
        assert out.count_quantiles[0.5][0, 0, 0] == 2.0

    def test_matches_exact_poisson_quantiles(self):
        table = one_cell_table(exposure=30.0)
        samples = manual_samples(table, np.log([[1.0]]))
        out = predictive_quantiles(samples, table, [0.1, 0.5, 0.9, 0.975])
        for level in (0.1, 0.5, 0.9, 0.975):
            assert out.count_quantiles[level][0, 0, 0] == stats.poisson.ppf(
                level, 30.0
            )

    def test_monotone_in_level(self):
        rng = np.random.default_rng(7)
        table = poisson_table(3, 4, 2)
        samples = manual_samples(
            table, np.log(rng.lognormal(-5.0, 0.5, size=(400, 2)))
        )
        out = predictive_quantiles(samples, table, [0.05, 0.25, 0.5, 0.75, 0.95])
        qs = [out.count_quantiles[p] for p in (0.05, 0.25, 0.5, 0.75, 0.95)]
        for a, b in zip(qs, qs[1:]):
            assert np.all(a <= b)
        # rate quantiles are count quantiles over exposure
        np.testing.assert_allclose(
            out.rate_quantiles[0.5], out.count_quantiles[0.5] / table.exposure
        )

    def test_mixture_cdf_inversion_against_brute_force(self):
        rng = np.random.default_rng(8)
        table = one_cell_table(exposure=40.0)
        lam = rng.lognormal(-0.7, 0.6, size=(64, 1))
        samples = manual_samples(table, np.log(lam))
        out = predictive_quantiles(samples, table, [0.3, 0.8])
        mus = 40.0 * lam[:, 0]
        for level in (0.3, 0.8):
            grid = np.arange(0, 500)
            cdf = np.mean(stats.poisson.cdf(grid[:, None], mus[None, :]), axis=1)
            brute = grid[np.searchsorted(cdf, level, side="left")]
            # searchsorted gives the first c with CDF >= level
            if cdf[brute] < level:
                brute += 1
            assert out.count_quantiles[level][0, 0, 0] == brute

    def test_subsampling_branch_stays_close(self):
        rng = np.random.default_rng(9)
        table = one_cell_table(exposure=25.0)
        lam = rng.lognormal(-0.5, 0.3, size=(3000, 1))
        samples = manual_samples(table, np.log(lam))
        full = predictive_quantiles(samples, table, [0.5, 0.9])
        sub = predictive_quantiles(samples, table, [0.5, 0.9], max_draws=500)
        for level in (0.5, 0.9):
            assert abs(
                full.count_quantiles[level][0, 0, 0]
                - sub.count_quantiles[level][0, 0, 0]
            ) <= 1.0

    def test_coverage_self_consistency(self):
        rng = np.random.default_rng(10)
        table = one_cell_table(exposure=30.0)
        lam = rng.lognormal(0.0, 0.3, size=(2000, 1))
        samples = manual_samples(table, np.log(lam))
        out = predictive_quantiles(samples, table, [0.1, 0.9])
        lo = out.count_quantiles[0.1][0, 0, 0]
        hi = out.count_quantiles[0.9][0, 0, 0]
        idx = rng.integers(0, 2000, size=5000)
        sim = rng.poisson(30.0 * lam[idx, 0])
        cover = np.mean((sim >= lo) & (sim <= hi))
        assert 0.76 <= cover <= 0.88

    def test_invalid_levels_rejected(self):
        table = one_cell_table()
        samples = manual_samples(table, np.log([[1.0]]))
        with pytest.raises(ValueError):
            predictive_quantiles(samples, table, [])
        with pytest.raises(ValueError):
            predictive_quantiles(samples, table, [0.0])
        with pytest.raises(ValueError):
            predictive_quantiles(samples, table, [1.2])

    def test_summary_wrapper_and_interval_lookup(self):
        table = one_cell_table(exposure=20.0)
        samples = manual_samples(table, np.log([[0.9], [1.1]]))
        out = predictive_summary(samples, table, levels=(0.025, 0.5, 0.975))
        lo, hi = out.equal_tailed_intervals(0.95)
        assert np.all(lo <= hi)
        with pytest.raises(KeyError, match="0.8"):
            out.equal_tailed_intervals(0.6)


class TestPredictiveSummaryValidation:
    def test_dispersion_floor_enforced(self):
        bad = PredictiveSummary(
            mean=np.array([10.0]),
            sd=np.array([1.0]),
            rate_mean=np.array([1.0]),
            rate_var=np.array([0.0]),
        )
        with pytest.raises(ValueError, match="Poisson floor"):
            bad.validate()

    def test_quantile_monotonicity_enforced(self):
        bad = PredictiveSummary(
            mean=np.array([10.0]),
            sd=np.array([4.0]),
            rate_mean=np.array([1.0]),
            rate_var=np.array([0.0]),
            count_quantiles={0.2: np.array([8.0]), 0.8: np.array([6.0])},
        )
        with pytest.raises(ValueError, match="monotone"):
            bad.validate()


class TestRelativeRisks:
    def _samples(self, seed=0, S=200):
        table = poisson_table(4, 6, 3)
        rng = np.random.default_rng(seed)
        samples = manual_samples(table, np.log(rng.lognormal(-5, 0.1, (S, 3))))
        samples.period = rng.normal(scale=0.2, size=(S, 6, 3))
        samples.cohort = rng.normal(scale=0.2, size=(S, 9, 3))
        samples.age = rng.normal(scale=0.2, size=(S, 4))
        return table, samples

    def test_reference_stratum_is_one(self):
        table, samples = self._samples()
        rr = relative_risks(samples, table, reference_stratum=1)
        np.testing.assert_allclose(rr.period.median[:, 1], 1.0)
        np.testing.assert_allclose(rr.cohort.median[:, 1], 1.0)
        np.testing.assert_allclose(rr.average_period.median[:, 1], 1.0)
        np.testing.assert_allclose(rr.average_cohort.median[:, 1], 1.0)

    def test_constant_shift_multiplies_risks(self):
        table, samples = self._samples(seed=1)
        base = relative_risks(samples, table)
        c = 0.7
        samples.period[:, :, 2] += c
        shifted = relative_risks(samples, table)
        np.testing.assert_allclose(
            shifted.period.median[:, 2],
            base.period.median[:, 2] * np.exp(c),
            rtol=1e-10,
        )
        np.testing.assert_allclose(
            shifted.period.median[:, 0], base.period.median[:, 0], rtol=1e-12
        )

    def test_invariant_under_linear_trend_shift(self):
        from mapc.model import drift_shift

        table, samples = self._samples(seed=2)
        base = relative_risks(samples, table)
        for s in range(samples.n_draws):
            state = samples.state(s)
            shifted = drift_shift(state, table, 0.31)
            samples.intercept[s] = shifted.intercept
            samples.age[s] = shifted.age
            samples.period[s] = shifted.period
            samples.cohort[s] = shifted.cohort
        moved = relative_risks(samples, table)
        for name in ("period", "cohort", "average_period", "average_cohort"):
            a, b = getattr(base, name), getattr(moved, name)
            np.testing.assert_allclose(a.median, b.median, atol=1e-10)
            np.testing.assert_allclose(a.lower, b.lower, atol=1e-10)
            np.testing.assert_allclose(a.upper, b.upper, atol=1e-10)

    def test_requires_a_shared_family(self):
        table, samples = self._samples()
        samples.spec = ApcModelSpec(age=FamilyConfig(mode="correlated"))
        with pytest.raises(ValueError, match="shared"):
            relative_risks(samples, table)

    def test_reference_stratum_bounds(self):
        table, samples = self._samples()
        with pytest.raises(ValueError, match="out of range"):
            relative_risks(samples, table, reference_stratum=3)

    def test_shared_period_family_gives_unit_risks(self):
        table, samples = self._samples()
        samples.spec = ApcModelSpec(period=FamilyConfig(mode="shared"))
        samples.period = np.zeros((samples.n_draws, 6))
        rr = relative_risks(samples, table)
        np.testing.assert_allclose(rr.period.median, 1.0)
        np.testing.assert_allclose(rr.period.upper, 1.0)


class TestForecastPeriodOrder:
    def test_orders(self):
        np.testing.assert_array_equal(
            forecast_period_order(10, "first"), [4, 3, 2, 1, 0]
        )
        np.testing.assert_array_equal(
            forecast_period_order(10, "second"), [5, 6, 7, 8, 9]
        )
        np.testing.assert_array_equal(forecast_period_order(5, None), np.arange(5))
        np.testing.assert_array_equal(forecast_period_order(5, "first"), [1, 0])

    def test_rejects_unknown_window(self):
        with pytest.raises(ValueError, match="window"):
            forecast_period_order(10, "middle")


class TestCrossPredictionPlan:
    def test_validation_errors(self):
        table = poisson_table(3, 6, 2)
        with pytest.raises(ValueError, match="out of range"):
            CrossPredictionPlan(target_strata=(5,)).validate(table)
        with pytest.raises(ValueError, match="levels"):
            CrossPredictionPlan(levels=(1.5,)).validate(table)
        holey = table.mask_block(0, np.arange(0, 2))
        with pytest.raises(ValueError, match="no truth"):
            CrossPredictionPlan(windows=("first",)).validate(holey)
        with pytest.raises(ValueError, match="remaining strata"):
            CrossPredictionPlan(
                windows=("first",), target_strata=(1,)
            ).validate(holey)

    def test_scenario_grid_cardinality(self):
        table = poisson_table(3, 6, 3)
        plan = CrossPredictionPlan()
        grid = list(plan.scenario_grid(table, default_seed=1))
        assert len(grid) == 2 * 3
        plan2 = CrossPredictionPlan(
            windows=("second",), target_strata=(1,), seeds=(5, 6, 7)
        )
        assert list(plan2.scenario_grid(table, 1)) == [
            ("second", 1, 5), ("second", 1, 6), ("second", 1, 7)
        ]


class TestRunCrossPrediction:
    def _config(self, **kw):
        base = dict(iterations=300, burn_in=100, thinning=2, chains=1, seed=3)
        base.update(kw)
        return SamplerConfig(**base)

    def test_in_sample_degenerate_plan(self):
        table = poisson_table(3, 6, 2, seed=4)
        plan = CrossPredictionPlan(
            windows=(None,), target_strata=(0,), levels=(0.8,)
        )
        results = run_cross_prediction(
            table, ApcModelSpec(), self._config(), plan
        )
        assert len(results) == 1
        res = results[0]
        assert res.window is None
        np.testing.assert_array_equal(res.periods, np.arange(6))
        # scores recompute exactly from the summary and truth
        from mapc.scoring import dss

        expect = dss(
            table.counts[:, :, 0], res.summary.mean[:, :, 0], res.summary.sd[:, :, 0]
        )
        np.testing.assert_allclose(res.report.dss_cells, expect)
        assert res.report.mean_dss == pytest.approx(expect.mean())

    def test_masked_scenarios_score_against_truth(self):
        table = poisson_table(3, 6, 2, seed=5)
        plan = CrossPredictionPlan(
            windows=("second",), target_strata=(1,), levels=(0.8,)
        )
        results = run_cross_prediction(
            table, ApcModelSpec(), self._config(), plan
        )
        res = results[0]
        np.testing.assert_array_equal(res.periods, [3, 4, 5])
        assert res.report.dss_cells.shape == (3, 3)
        assert res.report.coverage[0.8] >= 0.0
        # the fit really masked the block: its table kept truth aside
        assert res.samples.n_draws == 100
        assert np.isfinite(res.report.mean_dss)

    def test_full_grid_cardinality(self):
        table = poisson_table(3, 4, 2, seed=6)
        plan = CrossPredictionPlan(levels=(0.8,))
        results = run_cross_prediction(
            table,
            ApcModelSpec(),
            self._config(iterations=120, burn_in=40, thinning=2),
            plan,
        )
        assert len(results) == 4  # 2 windows x 2 strata
        labels = {(r.window, r.target_stratum) for r in results}
        assert labels == {("first", 0), ("first", 1), ("second", 0), ("second", 1)}


def reverse_table(table):
    """Reverse both the age and the period axes (cohorts map to
    reversed cohorts, so the model is exactly symmetric)."""
    return RegistryTable(
        counts=table.counts[::-1, ::-1, :].copy(),
        exposure=table.exposure[::-1, ::-1, :].copy(),
        observed=table.observed[::-1, ::-1, :].copy(),
        age_period_ratio=table.age_period_ratio,
    )


class TestTimeSymmetry:
    def test_prediction_pipeline_equivariant_under_reversal(self):
        # two-year age bands so the cohort index map is nontrivial
        rng = np.random.default_rng(12)
        I, J, R, M = 4, 6, 2, 2
        table = RegistryTable(
            counts=rng.poisson(30.0, size=(I, J, R)),
            exposure=rng.uniform(1e3, 2e3, size=(I, J, R)),
            observed=np.ones((I, J, R), dtype=bool),
            age_period_ratio=M,
        )
        K = table.n_cohorts
        S = 40
        samples = manual_samples(table, rng.normal(-3.5, 0.1, (S, R)))
        samples.age = rng.normal(scale=0.3, size=(S, I))
        samples.period = rng.normal(scale=0.3, size=(S, J, R))
        samples.cohort = rng.normal(scale=0.3, size=(S, K, R))
        samples.overdispersion = rng.normal(scale=0.1, size=(S, I, J, R))

        rev = reverse_table(table)
        mirrored = manual_samples(rev, samples.intercept.copy())
        mirrored.age = samples.age[:, ::-1].copy()
        mirrored.period = samples.period[:, ::-1, :].copy()
        mirrored.cohort = samples.cohort[:, ::-1, :].copy()
        mirrored.overdispersion = samples.overdispersion[:, ::-1, ::-1, :].copy()

        fwd = predictive_summary(samples, table, levels=(0.1, 0.5, 0.9))
        bwd = predictive_summary(mirrored, rev, levels=(0.1, 0.5, 0.9))
        np.testing.assert_allclose(
            bwd.mean[::-1, ::-1, :], fwd.mean, rtol=1e-12
        )
        np.testing.assert_allclose(bwd.sd[::-1, ::-1, :], fwd.sd, rtol=1e-12)
        for level in (0.1, 0.5, 0.9):
            np.testing.assert_array_equal(
                bwd.count_quantiles[level][::-1, ::-1, :],
                fwd.count_quantiles[level],
            )

    def test_backward_forecast_matches_reversed_forward(self):
        # the fitted forecast inherits the exact model symmetry, so the
        # two directions agree up to Monte Carlo error; tolerances were
        # frozen at about twice the measured run-to-run spread (long
        # chains bring the mean gap under 1.5%)
        table = poisson_table(4, 6, 2, seed=11, exposure=5e4)
        spec = ApcModelSpec()
        cfg = SamplerConfig(
            iterations=2600, burn_in=600, thinning=2, chains=2, seed=21
        )
        plan_back = CrossPredictionPlan(
            windows=("first",), target_strata=(0,), levels=(0.8,)
        )
        res_back = run_cross_prediction(table, spec, cfg, plan_back)[0]

        rev = reverse_table(table)
        plan_fwd = CrossPredictionPlan(
            windows=("second",), target_strata=(0,), levels=(0.8,)
        )
        res_fwd = run_cross_prediction(rev, spec, cfg, plan_fwd)[0]

        mu_back = res_back.summary.mean[:, :3, 0]
        mu_fwd = res_fwd.summary.mean[::-1, ::-1, 0][:, :3]
        sd_back = res_back.summary.sd[:, :3, 0]
        sd_fwd = res_fwd.summary.sd[::-1, ::-1, 0][:, :3]
        np.testing.assert_allclose(mu_back, mu_fwd, rtol=0.20)
        np.testing.assert_allclose(sd_back, sd_fwd, rtol=0.35)
