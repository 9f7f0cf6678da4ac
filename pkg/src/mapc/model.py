"""Correlated multivariate age-period-cohort model for registry counts.

Observed counts y[i, j, r] for age group i, period j and stratum r are
modelled as Poisson with mean n[i, j, r] * exp(eta[i, j, r]) where the
log relative risk decomposes additively:

    eta = intercept_r + age_(i,r) + period_(j,r) + cohort_(k,r) + overdisp_(i,j,r)

with cohort index k = M * (I - i) + j for an age-to-period width ratio
M.  Each effect family is either shared across strata, stratum specific
with independent smoothing priors, or stratum specific with priors
coupled through an equicorrelation matrix.  Time effects get intrinsic
second-order random walk priors; the cell-level overdispersion effects
get exchangeable Gaussian priors, optionally correlated across strata
within each cell.

Correlations are parameterized on an unbounded scale through a
generalized Fisher z transform so they can be given Gaussian priors and
updated by random-walk proposals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .gmrf import (
    Equicorrelation,
    gmrf_log_density,
    kronecker_precision,
    rw2_precision,
)

__all__ = [
    "TIME_FAMILIES",
    "ALL_FAMILIES",
    "RegistryTable",
    "FamilyConfig",
    "ApcModelSpec",
    "ApcState",
    "cohort_index",
    "cohort_index_grid",
    "fisher_z_to_correlation",
    "correlation_to_fisher_z",
    "family_contribution",
    "structured_predictor",
    "linear_predictor",
    "log_likelihood",
    "poisson_log_likelihood",
    "log_prior",
    "second_differences",
    "drift_shift",
    "stack_stratum_major",
    "unstack_stratum_major",
]

TIME_FAMILIES = ("age", "period", "cohort")
ALL_FAMILIES = ("age", "period", "cohort", "overdispersion")

# Linear predictors are clipped to this symmetric range inside every
# exp() so likelihood evaluations stay finite; the sampler counts how
# often the clip is active.
ETA_CLAMP = 40.0


def cohort_index(i: int, j: int, n_ages: int, ratio: int = 1) -> int:
    """One-based cohort index k = M * (I - i) + j.

    ``i`` and ``j`` are one-based age and period indices; ``ratio`` is
    the age-to-period interval width ratio M.  The oldest age group in
    the first period belongs to cohort 1 and indices increase toward
    more recent birth cohorts, up to K = M * (I - 1) + J.
    """
    if not (1 <= i <= n_ages):
        raise ValueError(f"age index {i} outside 1..{n_ages}")
    if j < 1:
        raise ValueError(f"period index {j} must be >= 1")
    return ratio * (n_ages - i) + j


def cohort_index_grid(n_ages: int, n_periods: int, ratio: int = 1) -> np.ndarray:
    """Zero-based cohort index for every (age, period) cell, shape (I, J)."""
    i = np.arange(n_ages)[:, None]
    j = np.arange(n_periods)[None, :]
    return ratio * (n_ages - 1 - i) + j


@dataclass
class RegistryTable:
    """Rectangular registry data: counts, exposures and an observation mask.

    Attributes
    ----------
    counts : ndarray, shape (I, J, R)
        Event counts.  Values at masked cells are ignored.
    exposure : ndarray, shape (I, J, R)
        Person-years at risk, strictly positive everywhere (predictions
        need exposures for masked cells too).
    observed : ndarray of bool, shape (I, J, R)
        True where the count is available to the likelihood.
    age_period_ratio : int
        Width of an age interval divided by the width of a period
        interval (M); determines the cohort indexing.
    """

    counts: np.ndarray
    exposure: np.ndarray
    observed: np.ndarray
    age_period_ratio: int = 1

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=float)
        self.exposure = np.asarray(self.exposure, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.counts.ndim != 3:
            raise ValueError("counts must have shape (ages, periods, strata)")
        if self.exposure.shape != self.counts.shape:
            raise ValueError("exposure shape differs from counts shape")
        if self.observed.shape != self.counts.shape:
            raise ValueError("observed mask shape differs from counts shape")
        if int(self.age_period_ratio) != self.age_period_ratio or self.age_period_ratio < 1:
            raise ValueError("age_period_ratio must be a positive integer")
        self.age_period_ratio = int(self.age_period_ratio)
        if np.any(self.exposure <= 0):
            raise ValueError("exposures must be strictly positive")
        obs_counts = self.counts[self.observed]
        if obs_counts.size and (
            np.any(obs_counts < 0) or np.any(obs_counts != np.round(obs_counts))
        ):
            raise ValueError("observed counts must be nonnegative integers")

    @property
    def n_ages(self) -> int:
        return self.counts.shape[0]

    @property
    def n_periods(self) -> int:
        return self.counts.shape[1]

    @property
    def n_strata(self) -> int:
        return self.counts.shape[2]

    @property
    def n_cohorts(self) -> int:
        return self.age_period_ratio * (self.n_ages - 1) + self.n_periods

    def cohort_grid(self) -> np.ndarray:
        return cohort_index_grid(self.n_ages, self.n_periods, self.age_period_ratio)

    def mask_block(self, stratum: int, periods: slice | np.ndarray) -> "RegistryTable":
        """Return a copy with one stratum's period block marked unobserved."""
        observed = self.observed.copy()
        observed[:, periods, stratum] = False
        return RegistryTable(
            counts=self.counts.copy(),
            exposure=self.exposure.copy(),
            observed=observed,
            age_period_ratio=self.age_period_ratio,
        )


@dataclass(frozen=True)
class FamilyConfig:
    """Prior configuration for one effect family.

    ``mode`` is one of ``shared``, ``independent`` or ``correlated``
    for the time families, and ``none``, ``independent`` or
    ``correlated`` for overdispersion.  The smoothing (or overdispersion)
    precision gets a Gamma(shape, rate) hyperprior; a correlated family
    additionally carries a Gaussian prior precision for its Fisher-z
    transformed correlation.  ``constraint`` selects the identifiability
    constraints imposed on time-effect vectors: ``sum`` (sum to zero,
    the default) or ``sum+linear`` (additionally remove the linear
    trend within each vector).
    """

    mode: str
    gamma_shape: float = 1.0
    gamma_rate: float = 5e-5
    fisher_z_prior_precision: float = 0.2
    constraint: str = "sum"

    def __post_init__(self) -> None:
        if self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ValueError("Gamma hyperprior parameters must be positive")
        if self.fisher_z_prior_precision <= 0:
            raise ValueError("Fisher-z prior precision must be positive")
        if self.constraint not in ("sum", "sum+linear"):
            raise ValueError(f"unknown constraint option {self.constraint!r}")


@dataclass(frozen=True)
class ApcModelSpec:
    """Modes and hyperpriors for all four effect families."""

    age: FamilyConfig = field(default_factory=lambda: FamilyConfig("shared"))
    period: FamilyConfig = field(
        default_factory=lambda: FamilyConfig("correlated")
    )
    cohort: FamilyConfig = field(
        default_factory=lambda: FamilyConfig("correlated")
    )
    overdispersion: FamilyConfig = field(
        default_factory=lambda: FamilyConfig("correlated", gamma_rate=5e-3)
    )

    def __post_init__(self) -> None:
        for name in TIME_FAMILIES:
            mode = self.family(name).mode
            if mode not in ("shared", "independent", "correlated"):
                raise ValueError(f"{name} family has unknown mode {mode!r}")
        odmode = self.overdispersion.mode
        if odmode not in ("none", "independent", "correlated"):
            raise ValueError(
                f"overdispersion mode {odmode!r} not supported; use none, "
                "independent or correlated"
            )

    def family(self, name: str) -> FamilyConfig:
        if name not in ALL_FAMILIES:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def has_shared_time_family(self) -> bool:
        return any(self.family(f).mode == "shared" for f in TIME_FAMILIES)

    def correlated_families(self) -> tuple[str, ...]:
        return tuple(
            f for f in ALL_FAMILIES if self.family(f).mode == "correlated"
        )

    def precision_families(self) -> tuple[str, ...]:
        """Families carrying a precision parameter (all enabled ones)."""
        fams = list(TIME_FAMILIES)
        if self.overdispersion.mode != "none":
            fams.append("overdispersion")
        return tuple(fams)

    def validate_for_table(self, table: RegistryTable) -> None:
        if table.n_strata < 2 and self.correlated_families():
            raise ValueError(
                "correlated families need at least two strata"
            )

    def with_independent_priors(self) -> "ApcModelSpec":
        """Copy with every correlated family downgraded to independent."""
        changes = {}
        for name in ALL_FAMILIES:
            cfg = self.family(name)
            if cfg.mode == "correlated":
                changes[name] = replace(cfg, mode="independent")
        return replace(self, **changes)


@dataclass
class ApcState:
    """One full configuration of model parameters.

    Time-effect arrays have shape (length,) when the family is shared
    and (length, n_strata) otherwise; overdispersion always has the full
    cell shape (I, J, R) and is identically zero when disabled.
    ``kappa`` maps enabled family names to precisions; ``rho_star``
    maps correlated family names to Fisher-z transformed correlations.
    """

    intercept: np.ndarray
    age: np.ndarray
    period: np.ndarray
    cohort: np.ndarray
    overdispersion: np.ndarray
    kappa: dict[str, float]
    rho_star: dict[str, float]

    def effect(self, family: str) -> np.ndarray:
        return getattr(self, family)

    def copy(self) -> "ApcState":
        return ApcState(
            intercept=self.intercept.copy(),
            age=self.age.copy(),
            period=self.period.copy(),
            cohort=self.cohort.copy(),
            overdispersion=self.overdispersion.copy(),
            kappa=dict(self.kappa),
            rho_star=dict(self.rho_star),
        )


def fisher_z_to_correlation(z, dim: int):
    """Map an unbounded value to a correlation in (-1/(dim-1), 1).

    rho = (exp(z) - 1) / (exp(z) + dim - 1), evaluated in an
    overflow-safe branch form.  Results that would round onto the
    interval boundary saturate to the nearest interior float so the
    output always defines a positive-definite equicorrelation matrix.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    # z >= 0: multiply through by exp(-z); expm1 keeps full relative
    # precision in the numerator near z = 0.
    out[pos] = -np.expm1(-z[pos]) / (1.0 + (dim - 1.0) * np.exp(-z[pos]))
    out[~pos] = np.expm1(z[~pos]) / (np.expm1(z[~pos]) + dim)
    lo = -1.0 / (dim - 1.0) if dim > 1 else -np.inf
    out = np.clip(out, np.nextafter(lo, 0.0), np.nextafter(1.0, 0.0))
    return out if out.ndim else float(out)


def correlation_to_fisher_z(rho, dim: int):
    """Inverse map: z = log((1 + rho (dim-1)) / (1 - rho))."""
    rho = np.asarray(rho, dtype=float)
    lo = -1.0 / (dim - 1.0) if dim > 1 else -np.inf
    if np.any(rho <= lo) or np.any(rho >= 1.0):
        raise ValueError(f"correlation outside open interval ({lo}, 1)")
    out = np.log1p((dim - 1.0) * rho) - np.log1p(-rho)
    return out if out.ndim else float(out)


def _broadcast_effect(effect: np.ndarray, axis: int, shape: tuple) -> np.ndarray:
    """Expand a (length,) or (length, R) effect to the cell grid."""
    I, J, R = shape
    if effect.ndim == 1:
        if axis == 0:
            return np.broadcast_to(effect[:, None, None], shape)
        return np.broadcast_to(effect[None, :, None], shape)
    if axis == 0:
        return np.broadcast_to(effect[:, None, :], shape)
    return np.broadcast_to(effect[None, :, :], shape)


def family_contribution(
    state: ApcState, table: RegistryTable, family: str
) -> np.ndarray:
    """Cell-grid contribution (I, J, R) of one effect family."""
    shape = (table.n_ages, table.n_periods, table.n_strata)
    if family == "intercept":
        return np.broadcast_to(state.intercept[None, None, :], shape)
    if family == "age":
        return _broadcast_effect(state.age, 0, shape)
    if family == "period":
        return _broadcast_effect(state.period, 1, shape)
    if family == "cohort":
        kgrid = table.cohort_grid()
        if state.cohort.ndim == 1:
            return np.broadcast_to(state.cohort[kgrid][:, :, None], shape)
        return state.cohort[kgrid, :]
    if family == "overdispersion":
        return state.overdispersion
    raise KeyError(family)


def structured_predictor(state: ApcState, table: RegistryTable) -> np.ndarray:
    """Linear predictor without the overdispersion term, shape (I, J, R)."""
    shape = (table.n_ages, table.n_periods, table.n_strata)
    eta = np.broadcast_to(state.intercept[None, None, :], shape).copy()
    eta += _broadcast_effect(state.age, 0, shape)
    eta += _broadcast_effect(state.period, 1, shape)
    kgrid = table.cohort_grid()
    if state.cohort.ndim == 1:
        eta += state.cohort[kgrid][:, :, None]
    else:
        eta += state.cohort[kgrid, :]
    return eta


def linear_predictor(state: ApcState, table: RegistryTable) -> np.ndarray:
    """Full log relative risk eta, including overdispersion."""
    return structured_predictor(state, table) + state.overdispersion


def poisson_log_likelihood(eta: np.ndarray, table: RegistryTable) -> float:
    """Poisson log likelihood of the observed cells for a given eta.

    Each observed cell contributes
    y * eta + y * log n - n * exp(eta) - log(y!).  The exponential is
    evaluated on eta clipped to +-ETA_CLAMP to stay finite.
    """
    mask = table.observed
    y = table.counts[mask]
    n = table.exposure[mask]
    e = eta[mask]
    rate = n * np.exp(np.clip(e, -ETA_CLAMP, ETA_CLAMP))
    return float(np.sum(y * e + y * np.log(n) - rate - gammaln(y + 1.0)))


def log_likelihood(state: ApcState, table: RegistryTable) -> float:
    return poisson_log_likelihood(linear_predictor(state, table), table)


def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    return (
        shape * np.log(rate)
        - gammaln(shape)
        + (shape - 1.0) * np.log(x)
        - rate * x
    )


def _time_family_log_density(
    effect: np.ndarray, kappa: float, rho_star: float | None, n_strata: int
) -> float:
    """GMRF log density of one time-effect family.

    Shared families use the plain RW2 precision; stratum-specific
    families use the Kronecker coupling, with correlation zero when the
    family is independent (the independent prior is exactly the rho=0
    special case).
    """
    n = effect.shape[0]
    if effect.ndim == 1:
        return gmrf_log_density(effect, rw2_precision(n, kappa))
    rho = 0.0 if rho_star is None else fisher_z_to_correlation(rho_star, n_strata)
    prec = kronecker_precision(
        Equicorrelation(n_strata, rho), rw2_precision(n, kappa)
    )
    return gmrf_log_density(stack_stratum_major(effect), prec)


def log_prior(state: ApcState, spec: ApcModelSpec, table: RegistryTable) -> float:
    """Joint log prior density of a state (flat prior on intercepts).

    Intrinsic time-family terms follow the generalized-determinant
    convention of :func:`mapc.gmrf.gmrf_log_density`; the proper
    overdispersion term is a full Gaussian log density including its
    2*pi constant.
    """
    R = table.n_strata
    total = 0.0
    for name in TIME_FAMILIES:
        cfg = spec.family(name)
        rho_star = state.rho_star.get(name) if cfg.mode == "correlated" else None
        total += _time_family_log_density(
            state.effect(name), state.kappa[name], rho_star, R
        )
    if spec.overdispersion.mode != "none":
        kz = state.kappa["overdispersion"]
        z = state.overdispersion
        ncells = z.size
        if spec.overdispersion.mode == "correlated":
            rho = fisher_z_to_correlation(state.rho_star["overdispersion"], R)
            C = Equicorrelation(R, rho)
            qf = float(np.einsum("ijr,rs,ijs->", z, C.inverse(), z))
            n_blocks = z.shape[0] * z.shape[1]
            total += 0.5 * n_blocks * (R * np.log(kz) - C.log_det())
        else:
            qf = float(np.sum(z * z))
            total += 0.5 * ncells * np.log(kz)
        total += -0.5 * kz * qf - 0.5 * ncells * np.log(2.0 * np.pi)
    for name in spec.precision_families():
        cfg = spec.family(name)
        total += _gamma_logpdf(state.kappa[name], cfg.gamma_shape, cfg.gamma_rate)
    for name in spec.correlated_families():
        prec = spec.family(name).fisher_z_prior_precision
        zstar = state.rho_star[name]
        total += 0.5 * np.log(prec / (2.0 * np.pi)) - 0.5 * prec * zstar**2
    return float(total)


def second_differences(effect: np.ndarray) -> np.ndarray:
    """Second differences along the index axis; drift-invariant summaries."""
    return np.diff(effect, n=2, axis=0)


def project_constraint(x: np.ndarray, constraint: str) -> np.ndarray:
    """Project a (n,) or (n, R) effect onto its constraint space.

    Removes the mean (and for ``sum+linear`` the centered linear trend)
    along the index axis; second differences are unchanged.
    """
    n = x.shape[0]
    x = x - x.mean(axis=0, keepdims=True)
    if constraint == "sum+linear":
        t = np.arange(1, n + 1, dtype=float)
        t -= t.mean()
        coef = np.tensordot(t, x, axes=(0, 0)) / (t @ t)
        x = x - t[:, None] * coef[None] if x.ndim == 2 else x - t * coef
    return x


def drift_shift(state: ApcState, table: RegistryTable, c: float) -> ApcState:
    """Apply the linear-trend reparameterization that leaves eta unchanged.

    Adds c*M*(i - mean i) to the age effects, subtracts c*(j - mean j)
    from the period effects and adds c*(k - mean k) to the cohort
    effects.  All shifts are centered, so sum-to-zero constraints stay
    satisfied while individual effects move; identifiable functionals
    must not change under this map.
    """
    M = table.age_period_ratio
    new = state.copy()

    def centered(n):
        t = np.arange(n, dtype=float)
        return t - t.mean()

    i_shift = c * M * centered(table.n_ages)
    j_shift = -c * centered(table.n_periods)
    k_shift = c * centered(table.n_cohorts)
    # K - 1 = M*(I-1) + (J-1), so the centering constants cancel in eta
    # exactly and the intercepts need no adjustment.
    if new.age.ndim == 1:
        new.age = new.age + i_shift
    else:
        new.age = new.age + i_shift[:, None]
    if new.period.ndim == 1:
        new.period = new.period + j_shift
    else:
        new.period = new.period + j_shift[:, None]
    if new.cohort.ndim == 1:
        new.cohort = new.cohort + k_shift
    else:
        new.cohort = new.cohort + k_shift[:, None]
    return new


def stack_stratum_major(effect: np.ndarray) -> np.ndarray:
    """Stack an (n, R) effect matrix stratum-major: (x_1', ..., x_R')'."""
    return effect.T.reshape(-1)


def unstack_stratum_major(x: np.ndarray, n: int, n_strata: int) -> np.ndarray:
    """Inverse of :func:`stack_stratum_major`, returning shape (n, R)."""
    return x.reshape(n_strata, n).T
