"""Quasi-Poisson Lee-Carter baseline.

Log-bilinear fit log(rate[i, j]) = alpha[i] + beta[i] * kappa[j] by
alternating Newton sweeps on the Poisson likelihood, random-walk-with-
drift extrapolation of the time index, and negative-binomial predictive
sampling whose variance matches the quasi-Poisson lack-of-fit scale.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .forecast import PredictiveSummary
from .model import RegistryTable

_log = logging.getLogger("mapc.leecarter")

_CONSTRAINT_TOLERANCE = 1e-8
_MAX_SWEEPS = 500
_DEVIANCE_RTOL = 1e-10
_MAX_HALVINGS = 40


@dataclass
class LeeCarterFit:
    """Fitted log-bilinear mortality surface for one stratum."""

    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    drift: float
    drift_se: float
    phi: float
    deviance_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    converged: bool = True

    @property
    def n_ages(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_periods(self) -> int:
        return self.kappa.shape[0]

    @property
    def innovation_sd(self) -> float:
        """Random-walk innovation SD, recovered from the drift SE."""
        return self.drift_se * np.sqrt(self.n_periods - 1)

    def log_rates(self) -> np.ndarray:
        return self.alpha[:, None] + self.beta[:, None] * self.kappa[None, :]

    def validate(self) -> None:
        if abs(self.kappa.sum()) > _CONSTRAINT_TOLERANCE:
            raise ValueError("time index does not sum to zero")
        if abs(self.beta.sum() - 1.0) > _CONSTRAINT_TOLERANCE:
            raise ValueError("age sensitivities do not sum to one")
        if not self.phi >= 1.0:
            raise ValueError("overdispersion scale must be at least one")


def _poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum(special.xlogy(y, y / mu) - (y - mu)))


def _mean_counts(n, alpha, beta, kappa):
    return n * np.exp(alpha[:, None] + beta[:, None] * kappa[None, :])


def fit_lee_carter(
    table,
    stratum: int = 0,
    exposure: np.ndarray | None = None,
    freeze_beta: np.ndarray | None = None,
    max_sweeps: int = _MAX_SWEEPS,
) -> LeeCarterFit:
    """Maximum-likelihood log-bilinear fit for one fully observed stratum.

    Alternates Newton updates over the age profile, the time index, and
    the age sensitivities, renormalizing the constraints after every
    sweep.  Step halving keeps the deviance monotone.  ``freeze_beta``
    pins the sensitivities (for example at 1/I, which collapses the
    model to an age+period GLM).

    ``table`` is either a RegistryTable (with ``stratum`` selecting the
    slice) or a raw age-by-period count matrix paired with ``exposure``;
    the raw form also accepts expected (non-integer) counts.
    """
    if isinstance(table, RegistryTable):
        if not 0 <= stratum < table.n_strata:
            raise ValueError(f"stratum {stratum} out of range")
        if not table.observed[:, :, stratum].all():
            raise ValueError("stratum must be fully observed")
        y = np.asarray(table.counts[:, :, stratum], dtype=float)
        n = np.asarray(table.exposure[:, :, stratum], dtype=float)
    else:
        if exposure is None:
            raise ValueError("raw count input requires an exposure matrix")
        y = np.asarray(table, dtype=float)
        n = np.asarray(exposure, dtype=float)
        if y.shape != n.shape or y.ndim != 2:
            raise ValueError("counts and exposures must be matching matrices")
    I, J = y.shape
    if I < 2 or J < 3:
        raise ValueError("need at least 2 ages and 3 periods")
    if np.any(n <= 0):
        raise ValueError("exposures must be positive")
    if np.any(y < 0):
        raise ValueError("counts must be nonnegative")

    ridge = 0.0
    if np.any(y.sum(axis=1) == 0) or np.any(y.sum(axis=0) == 0):
        warnings.warn(
            "zero row or column of counts: fit is degenerate, "
            "continuing with a ridge fallback",
            UserWarning,
            stacklevel=2,
        )
        ridge = 1e-8 * max(float(y.sum()), 1.0) + 1e-12

    alpha = np.log((y.sum(axis=1) + 0.5) / n.sum(axis=1))
    if freeze_beta is not None:
        beta = np.asarray(freeze_beta, dtype=float).copy()
        if beta.shape != (I,):
            raise ValueError("frozen sensitivities need one value per age")
        if abs(beta.sum() - 1.0) > 1e-6:
            raise ValueError("frozen sensitivities must sum to one")
    else:
        beta = np.full(I, 1.0 / I)
    kappa = np.zeros(J)

    def halved_step(block, delta, dev):
        """Apply a Newton increment, halving until deviance drops."""
        saved = block.copy()
        step = 1.0
        for _ in range(_MAX_HALVINGS):
            block[:] = saved + step * delta
            mu = _mean_counts(n, alpha, beta, kappa)
            new = _poisson_deviance(y, mu)
            if new <= dev * (1.0 + 1e-12) + 1e-12:
                return new
            step *= 0.5
        block[:] = saved
        return dev

    mu = _mean_counts(n, alpha, beta, kappa)
    dev = _poisson_deviance(y, mu)
    trace = [dev]
    converged = False
    for _ in range(max_sweeps):
        prev = dev
        mu = _mean_counts(n, alpha, beta, kappa)
        resid = y - mu
        delta = resid.sum(axis=1) / (mu.sum(axis=1) + ridge)
        dev = halved_step(alpha, delta, dev)

        mu = _mean_counts(n, alpha, beta, kappa)
        resid = y - mu
        delta = (resid * beta[:, None]).sum(axis=0) / (
            (mu * beta[:, None] ** 2).sum(axis=0) + ridge
        )
        dev = halved_step(kappa, delta, dev)
        shift = kappa.mean()
        kappa -= shift
        alpha += beta * shift

        if freeze_beta is None:
            mu = _mean_counts(n, alpha, beta, kappa)
            resid = y - mu
            delta = (resid * kappa[None, :]).sum(axis=1) / (
                (mu * kappa[None, :] ** 2).sum(axis=1) + ridge
            )
            dev = halved_step(beta, delta, dev)
            scale = beta.sum()
            if abs(scale) > 1e-12:
                beta /= scale
                kappa *= scale

        mu = _mean_counts(n, alpha, beta, kappa)
        dev = _poisson_deviance(y, mu)
        trace.append(dev)
        if abs(prev - dev) <= _DEVIANCE_RTOL * max(abs(prev), 1.0):
            converged = True
            break

    mu = _mean_counts(n, alpha, beta, kappa)
    pearson = float(np.sum((y - mu) ** 2 / mu))
    phi = max(1.0, pearson / ((I - 1) * (J - 2)))

    diffs = np.diff(kappa)
    drift = (kappa[-1] - kappa[0]) / (J - 1)
    innovation_var = float(np.sum((diffs - drift) ** 2) / (J - 2))
    drift_se = np.sqrt(innovation_var / (J - 1))

    fit = LeeCarterFit(
        alpha=alpha,
        beta=beta,
        kappa=kappa,
        drift=float(drift),
        drift_se=float(drift_se),
        phi=float(phi),
        deviance_trace=np.asarray(trace),
        converged=converged,
    )
    fit.validate()
    _log.info(
        "lee-carter fit: stratum=%d sweeps=%d deviance=%.6g phi=%.4f "
        "drift=%.5g converged=%s",
        stratum, len(trace) - 1, dev, phi, drift, converged,
    )
    return fit


def fit_all_strata(table: RegistryTable, **kwargs) -> list[LeeCarterFit]:
    return [fit_lee_carter(table, r, **kwargs) for r in range(table.n_strata)]


@dataclass(frozen=True)
class KappaPath:
    """Per-step Gaussian law of the extrapolated time index."""

    mean: np.ndarray
    variance: np.ndarray
    direction: str

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]


def extrapolate_kappa(
    fit: LeeCarterFit,
    horizon: int,
    direction: str = "forward",
    include_drift_uncertainty: bool = True,
) -> KappaPath:
    """Random-walk-with-drift extrapolation of the fitted time index.

    The h-step mean continues the drift from the relevant endpoint
    (sign-flipped for backward projection, which is native rather than
    a reverse-the-data workaround).  The h-step variance accumulates
    the innovation variance, plus the drift-estimation term
    (h * drift_se)^2 unless ``include_drift_uncertainty`` is off.  Only
    the time-index uncertainty enters.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    J = fit.n_periods
    if J < 3:
        raise ValueError("insufficient data: need at least 3 periods")
    h = np.arange(1, horizon + 1, dtype=float)
    if direction == "forward":
        mean = fit.kappa[-1] + h * fit.drift
    else:
        mean = fit.kappa[0] - h * fit.drift
    variance = h * fit.innovation_sd**2
    if include_drift_uncertainty:
        variance = variance + (h * fit.drift_se) ** 2
    return KappaPath(mean=mean, variance=variance, direction=direction)


def sample_counts(mean_counts: np.ndarray, phi: float, rng) -> np.ndarray:
    """Counts with mean m and variance phi * m.

    phi = 1 is exact Poisson; phi > 1 is negative binomial with
    d = m / (phi - 1), giving variance m * (1 + m / d) = phi * m.
    """
    m = np.asarray(mean_counts, dtype=float)
    if phi < 1.0:
        raise ValueError("overdispersion scale below 1 is not allowed")
    if np.any(m <= 0):
        raise ValueError("count means must be positive")
    if phi == 1.0:
        return rng.poisson(m)
    d = m / (phi - 1.0)
    return rng.negative_binomial(n=d, p=d / (d + m))


def lee_carter_predictive(
    fit: LeeCarterFit,
    path: KappaPath,
    exposure: np.ndarray,
    rng,
    n_draws: int,
    levels=(0.025, 0.5, 0.975),
) -> PredictiveSummary:
    """Predictive law of the counts over the extrapolation window.

    Draws time-index paths from their Gaussian extrapolation, then one
    count per cell and draw (negative binomial for phi > 1, Poisson at
    phi = 1).  Moments use the quasi-Poisson form
    var = phi * n * E(rate) + n^2 * Var(rate); quantiles are empirical
    over the sampled counts.
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    if fit.phi < 1.0:
        raise ValueError("overdispersion scale below 1 is not allowed")
    exposure = np.asarray(exposure, dtype=float)
    if exposure.shape != (fit.n_ages, path.horizon):
        raise ValueError(
            f"exposure shape {exposure.shape} does not match "
            f"{fit.n_ages} ages x horizon {path.horizon}"
        )
    if np.any(exposure <= 0):
        raise ValueError("exposures must be positive")
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"quantile level {level} outside (0, 1)")

    kap = path.mean[None, :] + np.sqrt(path.variance)[None, :] * (
        rng.standard_normal((n_draws, path.horizon))
    )
    eta = fit.alpha[None, :, None] + fit.beta[None, :, None] * kap[:, None, :]
    lam = np.exp(eta)
    m = exposure[None, :, :] * lam
    counts = sample_counts(m, fit.phi, rng)

    rate_mean = lam.mean(axis=0)
    rate_var = lam.var(axis=0)
    mean = exposure * rate_mean
    sd = np.sqrt(fit.phi * mean + exposure**2 * rate_var)
    count_q = {}
    rate_q = {}
    for level in levels:
        q = np.quantile(counts, level, axis=0, method="inverted_cdf")
        count_q[float(level)] = q.astype(float)
        rate_q[float(level)] = q / exposure
    out = PredictiveSummary(
        mean=mean,
        sd=sd,
        rate_mean=rate_mean,
        rate_var=rate_var,
        count_quantiles=count_q,
        rate_quantiles=rate_q,
    )
    out.validate()
    return out
