"""Posterior predictive distributions and cross-prediction experiments.

Predictive moments compound posterior rate uncertainty with Poisson
count variation: with lambda = exp(eta) and exposure n, the predictive
count mean is n*E(lambda) and the variance n*E(lambda) + n^2*Var(lambda),
the expectation and variance running over retained posterior draws.
Count quantiles invert the exact mixture-of-Poissons CDF numerically.

Cross-prediction masks one stratum's data in a period window, refits,
predicts the hidden block, and scores it against the held-back truth;
repeating over strata and windows gives the full experiment grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .model import ApcModelSpec, RegistryTable
from .sampler import PosteriorSamples, SamplerConfig, run_chain
from .scoring import ScoreReport

__all__ = [
    "PredictiveSummary",
    "Band",
    "RelativeRiskSummary",
    "CrossPredictionPlan",
    "ScenarioResult",
    "predictive_moments",
    "predictive_quantiles",
    "predictive_summary",
    "relative_risks",
    "forecast_period_order",
    "run_cross_prediction",
]

_log = logging.getLogger("mapc.forecast")

# over-Poisson dispersion can only be violated by rounding
_DISPERSION_TOLERANCE = 1e-9

# beyond this many retained draws, quantile inversion subsamples
_MAX_QUANTILE_DRAWS = 20000


@dataclass
class PredictiveSummary:
    """Per-cell predictive distribution summaries on the (I, J, R) grid.

    ``count_quantiles`` and ``rate_quantiles`` map level -> array; rate
    quantiles are count quantiles divided by exposure.
    """

    mean: np.ndarray
    sd: np.ndarray
    rate_mean: np.ndarray
    rate_var: np.ndarray
    count_quantiles: dict = field(default_factory=dict)
    rate_quantiles: dict = field(default_factory=dict)

    def validate(self) -> None:
        if np.any(self.sd**2 < self.mean * (1.0 - _DISPERSION_TOLERANCE)):
            raise ValueError("predictive variance fell below the Poisson floor")
        levels = sorted(self.count_quantiles)
        for lo, hi in zip(levels, levels[1:]):
            if np.any(self.count_quantiles[lo] > self.count_quantiles[hi]):
                raise ValueError("count quantiles not monotone in level")

    def _quantile_at(self, level: float) -> np.ndarray:
        # keys may carry float noise from (1 - level) / 2 arithmetic
        for key, value in self.count_quantiles.items():
            if abs(key - level) < 1e-9:
                return value
        raise KeyError(level)

    def equal_tailed_intervals(self, level: float):
        """(lower, upper) count quantile arrays for a central interval."""
        lo, hi = (1.0 - level) / 2.0, (1.0 + level) / 2.0
        try:
            return self._quantile_at(lo), self._quantile_at(hi)
        except KeyError:
            raise KeyError(
                f"quantiles at levels {lo:g} and {hi:g} required for a "
                f"{level:g} interval; compute them with predictive_quantiles"
            ) from None


def predictive_moments(samples: PosteriorSamples, table: RegistryTable) -> PredictiveSummary:
    """Predictive count mean and SD per cell from posterior rate draws."""
    if samples.n_draws == 0:
        raise ValueError("no retained draws to summarize")
    lam = samples.rates(table)
    rate_mean = lam.mean(axis=0)
    rate_var = lam.var(axis=0)
    mean = table.exposure * rate_mean
    var = mean + table.exposure**2 * rate_var
    out = PredictiveSummary(
        mean=mean, sd=np.sqrt(var), rate_mean=rate_mean, rate_var=rate_var
    )
    out.validate()
    return out


def _mixture_count_quantile(mus: np.ndarray, level: float) -> np.ndarray:
    """Smallest integer c with mean_s PoissonCDF(c; mus[s]) >= level.

    ``mus`` has shape (draws, cells); binary search per cell on the
    exact mixture CDF.
    """
    n_cells = mus.shape[1]
    hi = np.ceil(mus.max(axis=0) + 10.0 * np.sqrt(mus.max(axis=0)) + 10.0)

    def cdf(c):
        return special.pdtr(c[None, :], mus).mean(axis=0)

    # widen until the upper bracket definitely reaches the level
    while True:
        bad = cdf(hi) < level
        if not np.any(bad):
            break
        hi[bad] = hi[bad] * 2 + 10
    lo = np.zeros(n_cells)
    at_zero = cdf(lo) >= level
    hi[at_zero] = 0.0
    while np.any(lo < hi):
        mid = np.floor((lo + hi) / 2.0)
        ge = cdf(mid) >= level
        hi = np.where(ge & (lo < hi), mid, hi)
        lo = np.where(~ge & (lo < hi), mid + 1.0, lo)
    return lo


def predictive_quantiles(
    samples: PosteriorSamples,
    table: RegistryTable,
    levels,
    max_draws: int = _MAX_QUANTILE_DRAWS,
) -> PredictiveSummary:
    """Moments plus count and rate quantiles at the requested levels."""
    levels = sorted(float(p) for p in levels)
    if not levels:
        raise ValueError("no quantile levels requested")
    if any(not (0.0 < p < 1.0) for p in levels):
        raise ValueError("quantile levels must lie strictly in (0, 1)")
    out = predictive_moments(samples, table)
    lam = samples.rates(table)
    S = lam.shape[0]
    if S > max_draws:
        # evenly strided subsample; draws are stored chain-major, so the
        # stride covers every chain proportionally
        idx = np.linspace(0, S - 1, max_draws).round().astype(int)
        lam = lam[idx]
    shape = lam.shape[1:]
    mus = (table.exposure[None, ...] * lam).reshape(lam.shape[0], -1)
    for level in levels:
        q = np.empty(mus.shape[1])
        for start in range(0, mus.shape[1], 512):
            block = slice(start, min(start + 512, mus.shape[1]))
            q[block] = _mixture_count_quantile(mus[:, block], level)
        counts = q.reshape(shape)
        out.count_quantiles[level] = counts
        out.rate_quantiles[level] = counts / table.exposure
    out.validate()
    return out


def predictive_summary(
    samples: PosteriorSamples, table: RegistryTable, levels=(0.025, 0.5, 0.975)
) -> PredictiveSummary:
    """Convenience wrapper: moments and quantiles in one call."""
    return predictive_quantiles(samples, table, levels)


@dataclass
class Band:
    """Posterior median with equal-tailed lower/upper bands."""

    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def _band(draws: np.ndarray, level: float) -> Band:
    alpha = (1.0 - level) / 2.0
    qs = np.quantile(draws, [alpha, 0.5, 1.0 - alpha], axis=0)
    return Band(median=qs[1], lower=qs[0], upper=qs[2])


@dataclass
class RelativeRiskSummary:
    """Stratum-vs-reference relative risks on period and cohort scales.

    ``period`` and ``cohort`` exponentiate effect differences directly;
    ``average_period`` and ``average_cohort`` exponentiate differences
    of the age-averaged linear predictor, the configurable alternative
    reading of an average relative risk.  All arrays have a stratum
    axis last and are identically 1 at the reference stratum.
    """

    reference_stratum: int
    level: float
    period: Band
    cohort: Band
    average_period: Band
    average_cohort: Band


def relative_risks(
    samples: PosteriorSamples,
    table: RegistryTable,
    reference_stratum: int = 0,
    level: float = 0.95,
) -> RelativeRiskSummary:
    """Posterior relative risks of each stratum against a reference.

    Stratum differences of time effects are identifiable only when at
    least one time family is shared across strata, which pins a common
    trend; otherwise this refuses to summarize them.
    """
    if not samples.spec.has_shared_time_family:
        raise ValueError(
            "relative risks need at least one time family shared across "
            "strata; with none shared, each stratum carries its own "
            "arbitrary linear trend and effect differences are not "
            "identifiable"
        )
    R = samples.n_strata
    r0 = reference_stratum
    if not (0 <= r0 < R):
        raise ValueError("reference stratum out of range")
    S = samples.n_draws

    def effect_rr(draws, length):
        if draws.ndim == 2:  # shared family: no stratum differences
            return np.ones((S, length, R))
        return np.exp(draws - draws[:, :, [r0]])

    eta = samples.eta(table)
    avg_period = np.exp(
        eta.mean(axis=1) - eta.mean(axis=1)[:, :, [r0]]
    )
    kgrid = table.cohort_grid()
    K = table.n_cohorts
    # cohorts with no cells (possible when M > J) keep a zero average
    member_counts = np.maximum(
        np.bincount(kgrid.ravel(), minlength=K), 1
    ).astype(float)
    acc = np.zeros((K, S, R))
    np.add.at(acc, kgrid.ravel(), eta.reshape(S, -1, R).transpose(1, 0, 2))
    eta_by_cohort = acc.transpose(1, 0, 2) / member_counts[None, :, None]
    avg_cohort = np.exp(eta_by_cohort - eta_by_cohort[:, :, [r0]])

    return RelativeRiskSummary(
        reference_stratum=r0,
        level=level,
        period=_band(effect_rr(samples.period, table.n_periods), level),
        cohort=_band(effect_rr(samples.cohort, K), level),
        average_period=_band(avg_period, level),
        average_cohort=_band(avg_cohort, level),
    )


def forecast_period_order(n_periods: int, window: str | None) -> np.ndarray:
    """Masked period indices ordered outward from the mask boundary.

    ``first`` masks periods [0, J//2) and forecasts backward in time,
    so the order runs from the boundary toward period 0; ``second``
    masks [J//2, J) forward; None means nothing masked (all periods,
    natural order).
    """
    half = n_periods // 2
    if window is None:
        return np.arange(n_periods)
    if window == "first":
        return np.arange(half - 1, -1, -1)
    if window == "second":
        return np.arange(half, n_periods)
    raise ValueError(f"unknown window {window!r}; use 'first', 'second' or None")


@dataclass(frozen=True)
class CrossPredictionPlan:
    """Scenario grid for leave-a-block-out prediction experiments.

    ``target_strata`` of None means every stratum; ``seeds`` of None
    runs one replicate with the sampler config's own seed.  A window of
    None is the degenerate in-sample plan (nothing masked).
    """

    windows: tuple = ("first", "second")
    target_strata: tuple | None = None
    levels: tuple = (0.5, 0.8, 0.95)
    seeds: tuple | None = None

    def scenario_grid(self, table: RegistryTable, default_seed: int):
        strata = (
            tuple(range(table.n_strata))
            if self.target_strata is None
            else tuple(self.target_strata)
        )
        seeds = (default_seed,) if self.seeds is None else tuple(self.seeds)
        for window in self.windows:
            for r in strata:
                for seed in seeds:
                    yield window, r, seed

    def validate(self, table: RegistryTable) -> None:
        strata = (
            tuple(range(table.n_strata))
            if self.target_strata is None
            else tuple(self.target_strata)
        )
        for r in strata:
            if not (0 <= r < table.n_strata):
                raise ValueError(f"target stratum {r} out of range")
        for level in self.levels:
            if not (0.0 < level < 1.0):
                raise ValueError("interval levels must lie in (0, 1)")
        for window in self.windows:
            periods = forecast_period_order(table.n_periods, window)
            if window is None:
                continue
            if periods.size == 0:
                raise ValueError("masked window is empty")
            for r in strata:
                if not table.observed[:, periods, r].all():
                    raise ValueError(
                        f"cells to mask for stratum {r} are not observed "
                        "in the input table, so there is no truth to score"
                    )
                others = [s for s in range(table.n_strata) if s != r]
                if others and not table.observed[:, :, others][:, periods].all():
                    raise ValueError(
                        "remaining strata must be fully observed in the window"
                    )


@dataclass
class ScenarioResult:
    """One cross-prediction scenario: fit, predictions, and scores."""

    window: str | None
    target_stratum: int
    seed: int
    periods: np.ndarray
    summary: PredictiveSummary
    report: ScoreReport
    samples: PosteriorSamples


def _interval_levels(levels) -> list[float]:
    qs = set()
    for level in levels:
        qs.add((1.0 - level) / 2.0)
        qs.add((1.0 + level) / 2.0)
    return sorted(qs)


def run_cross_prediction(
    table: RegistryTable,
    spec: ApcModelSpec,
    config: SamplerConfig,
    plan: CrossPredictionPlan,
) -> list[ScenarioResult]:
    """Mask, refit, predict, and score every scenario in the plan."""
    plan.validate(table)
    results = []
    for window, r, seed in plan.scenario_grid(table, config.seed):
        periods = forecast_period_order(table.n_periods, window)
        masked = (
            table if window is None else table.mask_block(r, periods)
        )
        cfg = replace(
            config, seed=seed, init_kappa=dict(config.init_kappa),
            init_rho_star=dict(config.init_rho_star),
        )
        _log.info(
            "scenario window=%s stratum=%d seed=%d: sampling", window, r, seed
        )
        samples = run_chain(masked, spec, cfg)
        summary = predictive_quantiles(
            samples, table, _interval_levels(plan.levels)
        )
        y = table.counts[:, :, r][:, periods]
        mean = summary.mean[:, :, r][:, periods]
        sd = summary.sd[:, :, r][:, periods]
        intervals = {}
        for level in plan.levels:
            lo, hi = summary.equal_tailed_intervals(level)
            intervals[level] = (
                lo[:, :, r][:, periods], hi[:, :, r][:, periods]
            )
        report = ScoreReport.build(y, mean, sd, intervals)
        results.append(
            ScenarioResult(
                window=window,
                target_stratum=r,
                seed=seed,
                periods=periods,
                summary=summary,
                report=report,
                samples=samples,
            )
        )
        _log.info(
            "scenario window=%s stratum=%d seed=%d: mean DSS %.4f",
            window, r, seed, report.mean_dss,
        )
    return results
