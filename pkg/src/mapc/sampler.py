"""MCMC engine for the correlated multivariate age-period-cohort model.

The sampler works on the eta-parameterization: the full linear
predictor eta[i, j, r] is a latent variable and the overdispersion
term is implicit as eta minus the structured part.  One sweep updates,
in this fixed order:

1. stratum intercepts (exact Gaussian draw, flat prior),
2. age, period, cohort effect families (exact constrained GMRF draws
   from their multivariate normal full conditionals),
2b. for tables with unobserved stratum-period blocks only: imputation
   moves that shift eta in lockstep with the effects so the implicit
   cell field stays fixed -- exact redraws of hidden coordinate
   blocks, per-stratum tilt proposals, and a joint redraw of each
   affected stratum's intercept-plus-paths block (see the classes
   below); fully observed tables skip these and consume no extra
   randomness,
3. every eta cell block by Metropolis-Hastings with a Gaussian
   proposal from a second-order Taylor expansion of the count
   likelihood around the current value (an exact Gibbs draw for
   blocks without observed cells, where the proposal collapses to the
   conditional prior),
4. all precision parameters by conjugate Gamma draws,
5. every Fisher-z correlation by adaptive random-walk
   Metropolis-Hastings, tuned toward a target acceptance rate during
   burn-in and frozen afterwards.

Chains are independent with RNG streams spawned from one seed, so runs
are bitwise reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .diagnostics import effective_sample_size, split_potential_scale_reduction
from .gmrf import Equicorrelation, rw2_structure, sample_constrained_dense
from .model import (
    ETA_CLAMP,
    TIME_FAMILIES,
    ApcModelSpec,
    ApcState,
    RegistryTable,
    family_contribution,
    fisher_z_to_correlation,
    log_prior,
    project_constraint,
    stack_stratum_major,
    structured_predictor,
    unstack_stratum_major,
)

__all__ = [
    "SamplerConfig",
    "SamplerError",
    "PosteriorSamples",
    "PoissonObservations",
    "GaussianObservations",
    "precision_update_params",
    "run_chain",
]

_log = logging.getLogger("mapc.sampler")


class SamplerError(RuntimeError):
    """Raised when a chain reaches an invalid state; carries the state."""

    def __init__(self, message: str, state: ApcState | None = None):
        super().__init__(message)
        self.state = state


@dataclass
class SamplerConfig:
    """Run-length, reproducibility and tuning knobs for the sampler.

    ``unconstrained_family`` selects the alternative parameterization
    that drops the sum-to-zero constraint for one stratum-specific time
    family and removes the stratum intercepts; the default keeps the
    constrained variant with intercepts.  Chains start from a moment
    decomposition of the observed log rates (see ``_moment_init``);
    ``init_kappa`` and ``init_rho_star`` override the hyperparameter
    part of that start, which is also how tests freeze them together
    with ``update_precisions`` / ``update_correlations``.
    """

    iterations: int = 6000
    burn_in: int = 1000
    thinning: int = 5
    chains: int = 2
    seed: int = 20260814
    target_acceptance: float = 0.40
    adaptation_window: int | None = None
    adapt_initial_scale: float = 0.5
    update_precisions: bool = True
    update_correlations: bool = True
    unconstrained_family: str | None = None
    init_kappa: dict = field(default_factory=dict)
    init_rho_star: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must lie in [0, iterations)")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not (0.0 < self.target_acceptance < 1.0):
            raise ValueError("target_acceptance must be in (0, 1)")
        if self.adaptation_window is not None and self.adaptation_window < 0:
            raise ValueError("adaptation_window must be nonnegative")
        if self.unconstrained_family is not None and self.unconstrained_family not in TIME_FAMILIES:
            raise ValueError("unconstrained_family must be a time family")
        if self.n_retained < 1:
            raise ValueError(
                "no retained draws: lower thinning or raise iterations"
            )

    @property
    def n_retained(self) -> int:
        """Retained draws per chain: floor((iterations - burn_in) / thinning)."""
        return (self.iterations - self.burn_in) // self.thinning

    @property
    def adapt_until(self) -> int:
        """Adaptation stops here and never extends past burn-in."""
        if self.adaptation_window is None:
            return self.burn_in
        return min(self.adaptation_window, self.burn_in)


class PoissonObservations:
    """Poisson count likelihood on the observed cells of a table."""

    def __init__(self, table: RegistryTable):
        self.mask = table.observed.astype(float)
        self.y = np.where(table.observed, table.counts, 0.0)
        self.n = table.exposure
        self.clamp_events = 0

    def _rate(self, eta: np.ndarray) -> np.ndarray:
        clipped = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        self.clamp_events += int(np.sum((clipped != eta) & (self.mask > 0)))
        return self.n * np.exp(clipped)

    def loglik_cells(self, eta: np.ndarray) -> np.ndarray:
        """Per-cell log likelihood up to a data-only constant."""
        return self.mask * (self.y * eta - self._rate(eta))

    def curvature(self, eta: np.ndarray) -> np.ndarray:
        """Negative second derivative of the cell log likelihood."""
        return self.mask * self._rate(eta)

    def pseudo_obs(self, eta: np.ndarray) -> np.ndarray:
        """Canonical linear term of the Taylor-expanded likelihood."""
        rate = self._rate(eta)
        return self.mask * (self.y - rate + rate * eta)


class GaussianObservations:
    """Gaussian pseudo-likelihood: values ~ N(eta, 1/precision).

    Replaces the Poisson law with a conjugate one, making the Taylor
    proposal exact (acceptance probability 1) and the whole model
    linear-Gaussian; used to validate the sampler against closed-form
    posteriors.
    """

    def __init__(self, values: np.ndarray, precision: float, observed: np.ndarray):
        self.values = np.asarray(values, dtype=float)
        self.tau = float(precision)
        self.mask = np.asarray(observed, dtype=float)
        self.clamp_events = 0

    def loglik_cells(self, eta: np.ndarray) -> np.ndarray:
        return self.mask * (-0.5 * self.tau * (self.values - eta) ** 2)

    def curvature(self, eta: np.ndarray) -> np.ndarray:
        return self.mask * self.tau

    def pseudo_obs(self, eta: np.ndarray) -> np.ndarray:
        return self.mask * self.tau * self.values


class _FamilyWorkspace:
    """Precomputed structure for one time-effect family."""

    def __init__(
        self,
        name: str,
        table: RegistryTable,
        spec: ApcModelSpec,
        config: SamplerConfig,
    ):
        self.name = name
        cfg = spec.family(name)
        self.mode = cfg.mode
        self.shared = cfg.mode == "shared"
        I, J, R = table.n_ages, table.n_periods, table.n_strata
        self.R = R
        if name == "age":
            self.n = I
            self.cell_index = np.broadcast_to(np.arange(I)[:, None], (I, J))
        elif name == "period":
            self.n = J
            self.cell_index = np.broadcast_to(np.arange(J)[None, :], (I, J))
        else:
            self.n = table.n_cohorts
            self.cell_index = table.cohort_grid()
        self.counts = np.bincount(self.cell_index.ravel(), minlength=self.n).astype(
            float
        )
        self.structure = rw2_structure(self.n).toarray()

        # coefficient indices with no observed cell behind them; a shared
        # family needs the index dark in every stratum before it counts
        seen = np.zeros((self.n, R))
        np.add.at(
            seen, self.cell_index.ravel(), table.observed.reshape(-1, R).astype(float)
        )
        if self.shared:
            self.hidden = [np.flatnonzero(seen.sum(axis=1) == 0)]
        else:
            self.hidden = [np.flatnonzero(seen[:, r] == 0) for r in range(R)]
        self.any_hidden = any(w.size for w in self.hidden)

        if config.unconstrained_family == name:
            self.constraint_rows = None
        else:
            rows = [np.ones((1, self.n))]
            if cfg.constraint == "sum+linear":
                t = np.arange(self.n, dtype=float)
                rows.append((t - t.mean())[None, :])
            base = np.vstack(rows)
            if self.shared:
                self.constraint_rows = base
            else:
                self.constraint_rows = np.kron(np.eye(R), base)

    def aggregate(self, w: np.ndarray) -> np.ndarray:
        """Sum the weighted cells onto the coefficient layout."""
        I, J, R = w.shape
        if self.name == "age":
            t = w.sum(axis=1)
        elif self.name == "period":
            t = w.sum(axis=0)
        else:
            t = np.zeros((self.n, R))
            np.add.at(t, self.cell_index.ravel(), w.reshape(-1, R))
        if self.shared:
            return t.sum(axis=1)
        return t.T.reshape(-1)  # stratum-major

    def prior_precision(self, kappa: float, rho: float) -> np.ndarray:
        if self.shared:
            return kappa * self.structure
        if self.R == 1:
            return kappa * self.structure
        Cinv = Equicorrelation(self.R, rho).inverse()
        return kappa * np.kron(Cinv, self.structure)

    def likelihood_precision(self, kz: float, Czinv: np.ndarray | None) -> np.ndarray:
        """X' Q_z X: diagonal by coefficient, equicorrelated by stratum."""
        if self.shared:
            total = self.R if Czinv is None else float(Czinv.sum())
            return np.diag(kz * total * self.counts)
        if Czinv is None:
            return kz * np.kron(np.eye(self.R), np.diag(self.counts))
        return kz * np.kron(Czinv, np.diag(self.counts))


def _zero_effect(n: int, shared: bool, R: int) -> np.ndarray:
    return np.zeros(n) if shared else np.zeros((n, R))


def _pooled_profile(resid: np.ndarray, w: np.ndarray, axis: int, shared: bool):
    """Weighted mean of resid along everything but `axis` (and strata)."""
    axes = tuple(a for a in ((0, 1, 2) if shared else (0, 1)) if a != axis)
    den = w.sum(axis=axes)
    num = resid.sum(axis=axes)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _cohort_profile(resid: np.ndarray, w: np.ndarray, kgrid: np.ndarray,
                    n_cohorts: int, shared: bool):
    flat = kgrid.ravel()
    if shared:
        num = np.bincount(flat, weights=resid.sum(axis=2).ravel(), minlength=n_cohorts)
        den = np.bincount(flat, weights=w.sum(axis=2).ravel(), minlength=n_cohorts)
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    cols = []
    for r in range(resid.shape[2]):
        num = np.bincount(flat, weights=resid[:, :, r].ravel(), minlength=n_cohorts)
        den = np.bincount(flat, weights=w[:, :, r].ravel(), minlength=n_cohorts)
        cols.append(np.divide(num, den, out=np.zeros_like(num), where=den > 0))
    return np.stack(cols, axis=1)


def _moment_init(table: RegistryTable, spec: ApcModelSpec):
    """Crude decomposition of observed log rates for chain initialization.

    Stratum, row, column and diagonal means of log((y + 0.5) / n) seed
    the intercepts and time effects, and realized second differences
    and the leftover cell variance seed the precisions.  Starting from
    zero effects and prior-mean precisions instead lets the first eta
    sweep park the whole signal in the implicit overdispersion field,
    a mode the smoothing precisions can take very long to escape.
    """
    I, J, R = table.n_ages, table.n_periods, table.n_strata
    shape = (I, J, R)
    w = table.observed.astype(float)
    lam = np.where(
        table.observed,
        np.log((np.where(table.observed, table.counts, 0.0) + 0.5) / table.exposure),
        0.0,
    )
    mu = np.zeros(R)
    for r in range(R):
        wr = w[:, :, r].sum()
        if wr > 0:
            mu[r] = float((lam[:, :, r] * w[:, :, r]).sum() / wr)
    resid = (lam - mu[None, None, :]) * w

    effects = {}
    kgrid = table.cohort_grid()
    families = (("age", 0), ("period", 1), ("cohort", None))
    for name, _ in families:
        shared = spec.family(name).mode == "shared"
        n = {"age": I, "period": J, "cohort": table.n_cohorts}[name]
        effects[name] = np.zeros(n) if shared else np.zeros((n, R))
    # Backfit row, column and diagonal means a few times; one pass
    # leaves sizable leakage because the three directions overlap.
    for _ in range(4):
        for name, axis in families:
            shared = spec.family(name).mode == "shared"
            if name == "cohort":
                delta = _cohort_profile(resid, w, kgrid, table.n_cohorts, shared)
                grid = delta[kgrid][:, :, None] if shared else delta[kgrid, :]
            else:
                delta = _pooled_profile(resid, w, axis, shared)
                vec = delta[:, None] if shared else delta
                grid = np.broadcast_to(np.expand_dims(vec, axis=1 - axis), shape)
            effects[name] = effects[name] + delta
            resid = resid - w * grid
    for name, _ in families:
        effects[name] = project_constraint(
            effects[name], spec.family(name).constraint
        )

    n_obs = max(w.sum(), 1.0)
    kappa_guess = {"overdispersion": float((resid ** 2).sum() / n_obs)}
    for name in TIME_FAMILIES:
        d = np.diff(effects[name], n=2, axis=0)
        kappa_guess[name] = float(np.mean(d ** 2)) if d.size else 0.0
    for name, v in kappa_guess.items():
        kappa_guess[name] = float(np.clip(1.0 / (v + 1e-12), 1e-2, 1e7))
    return mu, effects, kappa_guess


def _initial_state(
    table: RegistryTable, spec: ApcModelSpec, config: SamplerConfig
) -> ApcState:
    I, J, R = table.n_ages, table.n_periods, table.n_strata
    if config.unconstrained_family is None:
        mu, effects, kappa_guess = _moment_init(table, spec)
    else:
        # Test harness parameterization: start flat, callers freeze or
        # seed the hyperparameters explicitly when they care.
        mu = np.zeros(R)
        effects = {
            "age": _zero_effect(I, spec.age.mode == "shared", R),
            "period": _zero_effect(J, spec.period.mode == "shared", R),
            "cohort": _zero_effect(table.n_cohorts, spec.cohort.mode == "shared", R),
        }
        kappa_guess = {
            name: spec.family(name).gamma_shape / spec.family(name).gamma_rate
            for name in spec.precision_families()
        }
    kappa = {}
    for name in spec.precision_families():
        kappa[name] = float(config.init_kappa.get(name, kappa_guess[name]))
    rho_star = {
        name: float(config.init_rho_star.get(name, 0.0))
        for name in spec.correlated_families()
    }
    return ApcState(
        intercept=mu,
        age=effects["age"],
        period=effects["period"],
        cohort=effects["cohort"],
        overdispersion=np.zeros((I, J, R)),
        kappa=kappa,
        rho_star=rho_star,
    )


def _overdisp_structure(state: ApcState, spec: ApcModelSpec, R: int):
    """Current overdispersion precision pieces: kz and C_z^{-1} (or None)."""
    kz = state.kappa["overdispersion"]
    if spec.overdispersion.mode == "correlated" and R > 1:
        rho = fisher_z_to_correlation(state.rho_star["overdispersion"], R)
        return kz, Equicorrelation(R, rho).inverse()
    return kz, None


def _apply_overdisp_precision(
    kz: float, Czinv: np.ndarray | None, eps: np.ndarray
) -> np.ndarray:
    if Czinv is None:
        return kz * eps
    return kz * np.einsum("rs,ijs->ijr", Czinv, eps)


def _update_intercepts(state, table, eta, kz, Czinv, rng) -> None:
    R = table.n_strata
    eps = eta - structured_predictor(state, table) + family_contribution(
        state, table, "intercept"
    )
    w = _apply_overdisp_precision(kz, Czinv, eps)
    b = w.sum(axis=(0, 1))
    ncells = table.n_ages * table.n_periods
    Q = kz * ncells * (np.eye(R) if Czinv is None else Czinv)
    upper = sla.cholesky(Q, lower=False)
    mean = sla.cho_solve((upper, False), b)
    state.intercept = mean + sla.solve_triangular(
        upper, rng.standard_normal(R), lower=False
    )


def _update_effect_family(
    state, table, spec, ws: _FamilyWorkspace, eta, kz, Czinv, rng
) -> None:
    name = ws.name
    eps = eta - structured_predictor(state, table) + family_contribution(
        state, table, name
    )
    w = _apply_overdisp_precision(kz, Czinv, eps)
    b = ws.aggregate(w)
    rho = 0.0
    if spec.family(name).mode == "correlated":
        rho = fisher_z_to_correlation(state.rho_star[name], table.n_strata)
    Q = ws.prior_precision(state.kappa[name], rho) + ws.likelihood_precision(kz, Czinv)
    # Q is positive definite (the latent field touches every coefficient),
    # so jitter is only a fallback for extreme conditioning.  The failed
    # attempt consumes no random numbers, keeping runs reproducible.
    try:
        draw = sample_constrained_dense(
            b, Q, jitter=False, A=ws.constraint_rows, rhs=None, rng=rng
        )
    except np.linalg.LinAlgError:
        draw = sample_constrained_dense(
            b, Q, jitter=True, A=ws.constraint_rows, rhs=None, rng=rng
        )
    if ws.shared:
        setattr(state, name, draw)
    else:
        setattr(state, name, unstack_stratum_major(draw, ws.n, table.n_strata))


def _refresh_hidden_blocks(state, table, spec, workspaces, eta, rng) -> None:
    """Redraw effect coordinates that no observed cell touches.

    When a stratum's whole period block is masked, those period (and
    trailing cohort) coordinates feel the data only through the cell
    field's tight coupling to eta, so the per-family draws move their
    level and drift in steps of the cell-field scale: far too slowly to
    mix at desk scale.  This step redraws each hidden block from its
    prior conditional (given the visible coordinates, the other strata
    and the constraints) and shifts eta by the same amount, leaving the
    cell field untouched.  In (effects, cell-field) coordinates this is
    an exact Gibbs update: no observed cell changes, so the likelihood
    and every other prior term cancel.  Tables without hidden blocks
    skip it entirely and consume no randomness.
    """
    R = table.n_strata
    for name in TIME_FAMILIES:
        ws = workspaces[name]
        if not ws.any_hidden:
            continue
        rho = 0.0
        if spec.family(name).mode == "correlated":
            rho = fisher_z_to_correlation(state.rho_star[name], R)
        Qf = ws.prior_precision(state.kappa[name], rho)
        effect = getattr(state, name)
        x = effect.copy() if ws.shared else stack_stratum_major(effect)
        for r, W in enumerate(ws.hidden):
            if W.size == 0:
                continue
            idx = W if ws.shared else r * ws.n + W
            rest = np.setdiff1d(np.arange(x.size), idx, assume_unique=True)
            Qu = Qf[np.ix_(idx, idx)]
            bu = -Qf[np.ix_(idx, rest)] @ x[rest]
            A = rhs = None
            if ws.constraint_rows is not None:
                Aw = ws.constraint_rows[:, idx]
                keep = np.abs(Aw).sum(axis=1) > 0
                if keep.any():
                    A = Aw[keep]
                    rhs = -ws.constraint_rows[keep][:, rest] @ x[rest]
            try:
                u = sample_constrained_dense(
                    bu, Qu, jitter=False, A=A, rhs=rhs, rng=rng
                )
            except np.linalg.LinAlgError:
                u = sample_constrained_dense(
                    bu, Qu, jitter=True, A=A, rhs=rhs, rng=rng
                )
            shift = np.zeros(ws.n)
            shift[W] = u - x[idx]
            x[idx] = u
            if ws.shared:
                eta += shift[ws.cell_index][:, :, None]
            else:
                eta[:, :, r] += shift[ws.cell_index]
        setattr(state, name, x if ws.shared else unstack_stratum_major(x, ws.n, R))


def _update_eta_independent(eta, m, obs, kz, rng):
    """Componentwise MH when overdispersion is independent across strata.

    Every cell's proposal and acceptance only involve that cell, so a
    stratum's chain is unaffected by other strata when no family
    couples them.  Returns (new eta, accepted count, proposal count).
    """
    c0 = obs.curvature(eta)
    q0 = kz + c0
    mu0 = (kz * m + obs.pseudo_obs(eta)) / q0
    prop = mu0 + rng.standard_normal(eta.shape) / np.sqrt(q0)
    c1 = obs.curvature(prop)
    q1 = kz + c1
    mu1 = (kz * m + obs.pseudo_obs(prop)) / q1
    d_target = (
        obs.loglik_cells(prop)
        - obs.loglik_cells(eta)
        - 0.5 * kz * ((prop - m) ** 2 - (eta - m) ** 2)
    )
    lq_fwd = 0.5 * np.log(q0) - 0.5 * q0 * (prop - mu0) ** 2
    lq_rev = 0.5 * np.log(q1) - 0.5 * q1 * (eta - mu1) ** 2
    log_alpha = d_target + lq_rev - lq_fwd
    accept = np.log(rng.uniform(size=eta.shape)) < log_alpha
    return np.where(accept, prop, eta), int(accept.sum()), accept.size


def _batched_chol_logdet(L: np.ndarray) -> np.ndarray:
    return np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)


def _update_eta_joint(eta, m, obs, kz, Czinv, rng):
    """Joint R-vector MH per (age, period) block for correlated z."""
    I, J, R = eta.shape
    Qz = kz * Czinv

    def proposal_parts(cur):
        c = obs.curvature(cur)
        Qp = np.broadcast_to(Qz, (I, J, R, R)).copy()
        idx = np.arange(R)
        Qp[..., idx, idx] += c
        bp = np.einsum("rs,ijs->ijr", Qz, m) + obs.pseudo_obs(cur)
        L = np.linalg.cholesky(Qp)
        mu = np.linalg.solve(Qp, bp[..., None])[..., 0]
        return Qp, L, mu

    def quad(Qp, v):
        return np.einsum("ijr,ijrs,ijs->ij", v, Qp, v)

    Qp0, L0, mu0 = proposal_parts(eta)
    noise = rng.standard_normal((I, J, R))
    prop = mu0 + np.linalg.solve(
        np.swapaxes(L0, -1, -2), noise[..., None]
    )[..., 0]
    Qp1, L1, mu1 = proposal_parts(prop)

    d_ll = (obs.loglik_cells(prop) - obs.loglik_cells(eta)).sum(axis=-1)
    Qz_full = np.broadcast_to(Qz, (I, J, R, R))
    d_prior = -0.5 * (quad(Qz_full, prop - m) - quad(Qz_full, eta - m))
    lq_fwd = _batched_chol_logdet(L0) - 0.5 * quad(Qp0, prop - mu0)
    lq_rev = _batched_chol_logdet(L1) - 0.5 * quad(Qp1, eta - mu1)
    log_alpha = d_ll + d_prior + lq_rev - lq_fwd
    accept = np.log(rng.uniform(size=(I, J))) < log_alpha
    new_eta = np.where(accept[:, :, None], prop, eta)
    return new_eta, int(accept.sum()), accept.size


def precision_update_params(
    state: ApcState, spec: ApcModelSpec, table: RegistryTable, family: str
) -> tuple[float, float]:
    """Gamma full-conditional parameters (shape, rate) for one precision.

    shape' = shape + generalized_rank / 2 and rate' = rate + quadratic
    form / 2, where the quadratic form uses the unit-precision structure
    (including the stratum coupling for correlated families).
    """
    cfg = spec.family(family)
    R = table.n_strata
    if family == "overdispersion":
        z = state.overdispersion
        rank = z.size
        if cfg.mode == "correlated" and R > 1:
            rho = fisher_z_to_correlation(state.rho_star["overdispersion"], R)
            Czinv = Equicorrelation(R, rho).inverse()
            qf = float(np.einsum("ijr,rs,ijs->", z, Czinv, z))
        else:
            qf = float(np.sum(z * z))
        return cfg.gamma_shape + 0.5 * rank, cfg.gamma_rate + 0.5 * qf
    x = state.effect(family)
    n = x.shape[0]
    S = rw2_structure(n).toarray()
    if x.ndim == 1:
        rank = n - 2
        qf = float(x @ S @ x)
    else:
        rank = R * (n - 2)
        M = x.T @ S @ x
        if cfg.mode == "correlated" and R > 1:
            rho = fisher_z_to_correlation(state.rho_star[family], R)
            Cinv = Equicorrelation(R, rho).inverse()
            qf = float(np.sum(Cinv * M))
        else:
            qf = float(np.trace(M))
    return cfg.gamma_shape + 0.5 * rank, cfg.gamma_rate + 0.5 * qf


def _update_precisions(state, spec, table, rng) -> None:
    for family in spec.precision_families():
        shape, rate = precision_update_params(state, spec, table, family)
        state.kappa[family] = float(rng.gamma(shape, 1.0 / rate))


def _correlation_log_target(
    state: ApcState, spec: ApcModelSpec, table: RegistryTable, family: str, rho_star: float
) -> float:
    """Log full-conditional density of one Fisher-z correlation."""
    cfg = spec.family(family)
    R = table.n_strata
    rho = fisher_z_to_correlation(rho_star, R)
    C = Equicorrelation(R, rho)
    Cinv = C.inverse()
    if family == "overdispersion":
        z = state.overdispersion
        n_blocks = z.shape[0] * z.shape[1]
        qf = state.kappa["overdispersion"] * float(
            np.einsum("ijr,rs,ijs->", z, Cinv, z)
        )
        logdet_term = -0.5 * n_blocks * C.log_det()
    else:
        x = state.effect(family)
        M = x.T @ rw2_structure(x.shape[0]).toarray() @ x
        qf = state.kappa[family] * float(np.sum(Cinv * M))
        logdet_term = -0.5 * (x.shape[0] - 2) * C.log_det()
    prior = -0.5 * cfg.fisher_z_prior_precision * rho_star**2
    return logdet_term - 0.5 * qf + prior


class _CorrelationUpdater:
    """Adaptive random-walk MH for one family's Fisher-z correlation."""

    def __init__(self, family: str, scale: float, target: float):
        self.family = family
        self.scale = scale
        self.target = target
        self.adapt_steps = 0
        self.accepted = 0
        self.proposed = 0

    def step(self, state, spec, table, rng, adapting: bool) -> None:
        cur = state.rho_star[self.family]
        prop = cur + self.scale * rng.standard_normal()
        delta = _correlation_log_target(
            state, spec, table, self.family, prop
        ) - _correlation_log_target(state, spec, table, self.family, cur)
        alpha = float(np.exp(min(delta, 0.0)))
        if rng.uniform() < alpha:
            state.rho_star[self.family] = prop
        if adapting:
            self.adapt_steps += 1
            gain = self.adapt_steps ** -0.6
            self.scale = float(
                np.clip(self.scale * np.exp(gain * (alpha - self.target)), 1e-3, 50.0)
            )
        else:
            self.proposed += 1
            self.accepted += int(state.rho_star[self.family] == prop)


class _DriftMove:
    """Adaptive MH tilt of one stratum's time path along its slope.

    With the plain sum constraint, adding a centered linear trend to a
    single stratum's column of a stratum-specific family is invisible
    to the smoothing prior: the penalty and the cross-stratum coupling
    both act through second differences, which a linear trend leaves
    unchanged.  Dragging eta along with the effect keeps the cell field
    fixed too, so only the likelihood at that stratum's observed cells
    resists the tilt.  The per-coordinate updates cross this direction
    very slowly once the cell-field precision is large, which stalls
    imputation for partially observed strata; this move samples the
    tilt directly.  Instantiated only for strata that have coordinates
    with no observed cells behind them, so fully observed tables
    consume the same random stream as without the move.
    """

    def __init__(self, family: str, stratum: int, scale: float, target: float):
        self.family = family
        self.stratum = stratum
        self.scale = scale
        self.target = target
        self.adapt_steps = 0
        self.accepted = 0
        self.proposed = 0

    def step(self, state, ws, eta, obs, rng, adapting: bool) -> None:
        r = self.stratum
        t_c = np.arange(ws.n) - (ws.n - 1) / 2.0
        delta = self.scale * rng.standard_normal()
        shift = delta * t_c[ws.cell_index]
        eta_prop = eta.copy()
        eta_prop[:, :, r] += shift
        gain_ll = float(
            obs.loglik_cells(eta_prop)[:, :, r].sum()
            - obs.loglik_cells(eta)[:, :, r].sum()
        )
        alpha = float(np.exp(min(gain_ll, 0.0)))
        accept = rng.uniform() < alpha
        if accept:
            state.effect(self.family)[:, r] += delta * t_c
            eta[:, :, r] += shift
        if adapting:
            self.adapt_steps += 1
            gain = self.adapt_steps ** -0.6
            self.scale = float(
                np.clip(self.scale * np.exp(gain * (alpha - self.target)), 1e-5, 50.0)
            )
        else:
            self.proposed += 1
            self.accepted += int(accept)


def _drift_moves(table, spec, config, workspaces) -> list[_DriftMove]:
    """Build the tilt moves for strata that need imputation help.

    A stratum qualifies when any stratum-specific family has a
    coordinate with no observed cell behind it for that stratum.  The
    move itself is only valid for stratum-specific families under the
    plain sum constraint: the extended constraint pins the linear trend
    to zero, and the dropped-constraint variant absorbs levels and
    trends into the family, where this fixed-direction proposal no
    longer matches the one slow mode.
    """
    R = table.n_strata
    hidden_strata = sorted(
        {
            r
            for ws in workspaces.values()
            if not ws.shared
            for r in range(R)
            if ws.hidden[r].size
        }
    )
    moves = []
    for name in TIME_FAMILIES:
        fam = spec.family(name)
        if fam.mode == "shared" or fam.constraint != "sum":
            continue
        if config.unconstrained_family == name:
            continue
        for r in hidden_strata:
            moves.append(
                _DriftMove(name, r, config.adapt_initial_scale, config.target_acceptance)
            )
    return moves


def _chol_upper_jittered(Q: np.ndarray) -> np.ndarray:
    """Upper Cholesky factor, retried with a relative diagonal jitter.

    The jitter changes only the proposal a caller builds from the
    factor; used consistently for the density too, the proposal stays
    valid, just not exactly the intended conditional.
    """
    try:
        return sla.cholesky(Q, lower=False)
    except sla.LinAlgError:
        scale = np.max(np.abs(Q.diagonal()))
        return sla.cholesky(Q + (1e-8 * scale) * np.eye(Q.shape[0]), lower=False)


def _chol_logpdf(x: np.ndarray, mu: np.ndarray, upper: np.ndarray) -> float:
    """Log density of N(mu, Q^-1) with Q = upper' upper, constants dropped."""
    resid = upper @ (x - mu)
    return float(np.sum(np.log(np.diag(upper))) - 0.5 * resid @ resid)


class _StratumBlockMove:
    """Joint MH redraw of one stratum's structured block.

    Bundles the stratum intercept with that stratum's column of every
    stratum-specific time family and proposes the whole block from a
    Gaussian built out of the families' conditional priors (given the
    other strata) and a quadratic expansion of the likelihood at the
    stratum's observed cells, moving eta in lockstep so the cell field
    never changes.  In (effects, cell-field) coordinates the cell-field
    prior then cancels exactly and the proposal is judged on the
    stratum's observed likelihood and the family priors alone, with the
    usual forward/reverse correction for the expansion point; with a
    Gaussian likelihood the expansion is exact and every proposal is
    accepted.  This is what lets a partially observed stratum's
    extrapolation uncertainty mix: the level, trend and boundary-shape
    trades between its intercept, visible path and hidden path all
    happen inside one joint draw, instead of leaking through
    cell-field-sized coordinate steps.
    """

    def __init__(self, stratum: int, table: RegistryTable, spec, workspaces):
        self.stratum = stratum
        I, J = table.n_ages, table.n_periods
        self.fams = [
            (name, workspaces[name])
            for name in TIME_FAMILIES
            if spec.family(name).mode != "shared"
        ]
        D = 1 + sum(ws.n for _, ws in self.fams)
        G = np.zeros((I * J, D))
        G[:, 0] = 1.0
        rows = []
        off = 1
        self.offsets = {}
        for name, ws in self.fams:
            self.offsets[name] = off
            G[np.arange(I * J), off + ws.cell_index.ravel()] = 1.0
            row = np.zeros((1, D))
            row[0, off : off + ws.n] = 1.0
            rows.append(row)
            if spec.family(name).constraint == "sum+linear":
                t = np.arange(ws.n, dtype=float)
                row = np.zeros((1, D))
                row[0, off : off + ws.n] = t - t.mean()
                rows.append(row)
            off += ws.n
        self.D = D
        self.G = G
        self.V = sla.null_space(np.vstack(rows))
        self.GV = G @ self.V
        self.accepted = 0
        self.proposed = 0

    def _pack(self, state) -> np.ndarray:
        x = np.empty(self.D)
        x[0] = state.intercept[self.stratum]
        for name, ws in self.fams:
            off = self.offsets[name]
            x[off : off + ws.n] = state.effect(name)[:, self.stratum]
        return x

    def step(self, state, spec, table, eta, obs, rng, counting: bool) -> None:
        r = self.stratum
        I, J, R = table.n_ages, table.n_periods, table.n_strata
        x = self._pack(state)
        gamma = self.V.T @ x
        eta_r = eta[:, :, r].ravel()
        eta0 = eta_r - self.G @ x

        Qp = np.zeros((self.D, self.D))
        bp = np.zeros(self.D)
        for name, ws in self.fams:
            kap = state.kappa[name]
            if spec.family(name).mode == "correlated" and R > 1:
                rho = fisher_z_to_correlation(state.rho_star[name], R)
                Cinv = Equicorrelation(R, rho).inverse()
            else:
                Cinv = np.eye(R)
            off = self.offsets[name]
            sl = slice(off, off + ws.n)
            Qp[sl, sl] = kap * Cinv[r, r] * ws.structure
            others = state.effect(name) @ Cinv[r] - Cinv[r, r] * state.effect(name)[:, r]
            bp[sl] = -kap * (ws.structure @ others)
        Qp_g = self.V.T @ Qp @ self.V
        bp_g = self.V.T @ bp

        def taylor(eta_full):
            W = obs.curvature(eta_full)[:, :, r].ravel()
            pseudo = obs.pseudo_obs(eta_full)[:, :, r].ravel()
            Qg = Qp_g + self.GV.T @ (W[:, None] * self.GV)
            bg = bp_g + self.GV.T @ (pseudo - W * eta0)
            upper = _chol_upper_jittered(Qg)
            mu = sla.cho_solve((upper, False), bg)
            return upper, mu

        upper_f, mu_f = taylor(eta)
        gamma_star = mu_f + sla.solve_triangular(
            upper_f, rng.standard_normal(gamma.shape[0]), lower=False
        )
        eta_prop = eta.copy()
        eta_prop[:, :, r] = (eta0 + self.GV @ gamma_star).reshape(I, J)
        upper_b, mu_b = taylor(eta_prop)

        dll = float(
            (obs.loglik_cells(eta_prop)[:, :, r] - obs.loglik_cells(eta)[:, :, r]).sum()
        )
        dprior = float(
            -0.5 * (gamma_star @ Qp_g @ gamma_star - gamma @ Qp_g @ gamma)
            + bp_g @ (gamma_star - gamma)
        )
        log_alpha = (
            dll
            + dprior
            + _chol_logpdf(gamma, mu_b, upper_b)
            - _chol_logpdf(gamma_star, mu_f, upper_f)
        )
        alpha = float(np.exp(min(log_alpha, 0.0)))
        accept = rng.uniform() < alpha
        if accept:
            x_star = self.V @ gamma_star
            state.intercept[r] = x_star[0]
            for name, ws in self.fams:
                off = self.offsets[name]
                state.effect(name)[:, r] = x_star[off : off + ws.n]
            eta[:, :, r] = eta_prop[:, :, r]
        if counting:
            self.proposed += 1
            self.accepted += int(accept)


def _stratum_block_moves(table, spec, config, workspaces) -> list[_StratumBlockMove]:
    """Build the joint block moves for strata that need imputation help.

    Same gating as the tilt moves, plus two requirements of the block
    itself: the stratum must have at least one observed cell (the flat
    intercept direction needs a likelihood anchor) and the constrained
    variant must be active (the block bundles the stratum intercept,
    which the dropped-constraint variant removes).
    """
    if config.unconstrained_family is not None:
        return []
    R = table.n_strata
    strata = sorted(
        {
            r
            for ws in workspaces.values()
            if not ws.shared
            for r in range(R)
            if ws.hidden[r].size and table.observed[:, :, r].any()
        }
    )
    return [_StratumBlockMove(r, table, spec, workspaces) for r in strata]


@dataclass
class PosteriorSamples:
    """Retained draws from all chains, stacked draw-major.

    Effect arrays keep their state-space shapes with a leading draw
    axis.  ``kappa`` and ``rho_star`` map family names to vectors of
    draws.  ``diagnostics`` maps parameter labels to (ESS, PSRF).
    """

    spec: ApcModelSpec
    n_ages: int
    n_periods: int
    n_strata: int
    n_cohorts: int
    age_period_ratio: int
    intercept: np.ndarray
    age: np.ndarray
    period: np.ndarray
    cohort: np.ndarray
    overdispersion: np.ndarray
    kappa: dict
    rho_star: dict
    chain_ids: np.ndarray
    acceptance: dict
    clamp_events: int
    diagnostics: dict

    @property
    def n_draws(self) -> int:
        return self.intercept.shape[0]

    def state(self, s: int) -> ApcState:
        return ApcState(
            intercept=self.intercept[s].copy(),
            age=self.age[s].copy(),
            period=self.period[s].copy(),
            cohort=self.cohort[s].copy(),
            overdispersion=self.overdispersion[s].copy(),
            kappa={k: float(v[s]) for k, v in self.kappa.items()},
            rho_star={k: float(v[s]) for k, v in self.rho_star.items()},
        )

    def eta(self, table: RegistryTable) -> np.ndarray:
        """Linear predictor per draw, shape (S, I, J, R)."""
        S = self.n_draws
        shape = (S, self.n_ages, self.n_periods, self.n_strata)
        out = np.empty(shape)
        kgrid = table.cohort_grid()
        for s in range(S):
            out[s] = self.intercept[s][None, None, :]
            if self.age.ndim == 2:
                out[s] += self.age[s][:, None, None]
            else:
                out[s] += self.age[s][:, None, :]
            if self.period.ndim == 2:
                out[s] += self.period[s][None, :, None]
            else:
                out[s] += self.period[s][None, :, :]
            if self.cohort.ndim == 2:
                out[s] += self.cohort[s][kgrid][:, :, None]
            else:
                out[s] += self.cohort[s][kgrid, :]
        out += self.overdispersion
        return out

    def rates(self, table: RegistryTable) -> np.ndarray:
        """exp(eta) per draw: the relative-risk scale lambda."""
        return np.exp(np.clip(self.eta(table), -ETA_CLAMP, ETA_CLAMP))


def run_chain(
    table: RegistryTable,
    spec: ApcModelSpec,
    config: SamplerConfig,
    observations=None,
) -> PosteriorSamples:
    """Run all chains and return stacked retained draws.

    ``observations`` defaults to the Poisson likelihood on the table's
    observed cells; passing :class:`GaussianObservations` swaps in the
    conjugate Gaussian likelihood used by correctness tests.
    """
    config.validate()
    spec.validate_for_table(table)
    if spec.overdispersion.mode == "none":
        raise ValueError(
            "the eta-parameterized sampler needs overdispersion enabled "
            "(mode 'independent' or 'correlated')"
        )
    if config.unconstrained_family is not None:
        if spec.family(config.unconstrained_family).mode == "shared":
            raise ValueError(
                "the dropped-constraint variant needs a stratum-specific family"
            )
    I, J, R = table.n_ages, table.n_periods, table.n_strata

    workspaces = {
        name: _FamilyWorkspace(name, table, spec, config) for name in TIME_FAMILIES
    }
    joint_eta = spec.overdispersion.mode == "correlated" and R > 1

    S_total = config.n_retained * config.chains
    rec = {
        "intercept": np.empty((S_total, R)),
        "age": np.empty((S_total,) + _zero_effect(I, spec.age.mode == "shared", R).shape),
        "period": np.empty(
            (S_total,) + _zero_effect(J, spec.period.mode == "shared", R).shape
        ),
        "cohort": np.empty(
            (S_total,)
            + _zero_effect(table.n_cohorts, spec.cohort.mode == "shared", R).shape
        ),
        "overdispersion": np.empty((S_total, I, J, R)),
    }
    kappa_rec = {k: np.empty(S_total) for k in spec.precision_families()}
    rho_rec = {k: np.empty(S_total) for k in spec.correlated_families()}
    chain_ids = np.empty(S_total, dtype=int)

    eta_accept = eta_propose = 0
    corr_updaters_all: list[_CorrelationUpdater] = []
    drift_moves_all: list[_DriftMove] = []
    block_moves_all: list[_StratumBlockMove] = []
    clamp_total = 0

    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    pos = 0
    for c in range(config.chains):
        rng = np.random.default_rng(seeds[c])
        state = _initial_state(table, spec, config)
        eta = structured_predictor(state, table).copy()
        if observations is None:
            obs = PoissonObservations(table)
        else:
            obs = observations
            obs.clamp_events = 0
        updaters = [
            _CorrelationUpdater(f, config.adapt_initial_scale, config.target_acceptance)
            for f in spec.correlated_families()
        ]
        drift_moves = _drift_moves(table, spec, config, workspaces)
        block_moves = _stratum_block_moves(table, spec, config, workspaces)
        for it in range(config.iterations):
            kz, Czinv = _overdisp_structure(state, spec, R)
            if config.unconstrained_family is None:
                _update_intercepts(state, table, eta, kz, Czinv, rng)
            for name in TIME_FAMILIES:
                _update_effect_family(
                    state, table, spec, workspaces[name], eta, kz, Czinv, rng
                )
            _refresh_hidden_blocks(state, table, spec, workspaces, eta, rng)
            for mv in drift_moves:
                mv.step(
                    state, workspaces[mv.family], eta, obs, rng,
                    it < config.adapt_until,
                )
            for bm in block_moves:
                bm.step(state, spec, table, eta, obs, rng, it >= config.adapt_until)
            m = structured_predictor(state, table)
            if joint_eta:
                eta, n_acc, n_prop = _update_eta_joint(eta, m, obs, kz, Czinv, rng)
            else:
                eta, n_acc, n_prop = _update_eta_independent(eta, m, obs, kz, rng)
            state.overdispersion = eta - m
            if it >= config.burn_in:
                eta_accept += n_acc
                eta_propose += n_prop
            if config.update_precisions:
                _update_precisions(state, spec, table, rng)
            if config.update_correlations:
                adapting = it < config.adapt_until
                for upd in updaters:
                    upd.step(state, spec, table, rng, adapting)
            if it >= config.burn_in and (it - config.burn_in + 1) % config.thinning == 0:
                lp = obs.loglik_cells(eta).sum() + log_prior(state, spec, table)
                if not np.isfinite(lp):
                    raise SamplerError(
                        f"non-finite log posterior at iteration {it}", state
                    )
                rec["intercept"][pos] = state.intercept
                rec["age"][pos] = state.age
                rec["period"][pos] = state.period
                rec["cohort"][pos] = state.cohort
                rec["overdispersion"][pos] = state.overdispersion
                for k in kappa_rec:
                    kappa_rec[k][pos] = state.kappa[k]
                for k in rho_rec:
                    rho_rec[k][pos] = state.rho_star[k]
                chain_ids[pos] = c
                pos += 1
        corr_updaters_all.extend(updaters)
        drift_moves_all.extend(drift_moves)
        block_moves_all.extend(block_moves)
        clamp_total += obs.clamp_events
        _log.info(
            "chain=%d iterations=%d retained=%d eta_acceptance=%.3f",
            c,
            config.iterations,
            config.n_retained,
            eta_accept / max(eta_propose, 1),
        )

    acceptance = {
        "eta_blocks": eta_accept / max(eta_propose, 1),
    }
    by_family: dict[str, list[_CorrelationUpdater]] = {}
    for upd in corr_updaters_all:
        by_family.setdefault(upd.family, []).append(upd)
    for fam, upds in by_family.items():
        prop = sum(u.proposed for u in upds)
        acc = sum(u.accepted for u in upds)
        acceptance[f"rho_star:{fam}"] = acc / max(prop, 1)
    drift_by_family: dict[str, list[_DriftMove]] = {}
    for mv in drift_moves_all:
        drift_by_family.setdefault(mv.family, []).append(mv)
    for fam, mvs in drift_by_family.items():
        prop = sum(m.proposed for m in mvs)
        acc = sum(m.accepted for m in mvs)
        acceptance[f"drift:{fam}"] = acc / max(prop, 1)
    if block_moves_all:
        prop = sum(m.proposed for m in block_moves_all)
        acc = sum(m.accepted for m in block_moves_all)
        acceptance["stratum_blocks"] = acc / max(prop, 1)

    diagnostics = {}
    per_chain = config.n_retained

    def chains_view(v: np.ndarray) -> np.ndarray:
        return v.reshape(config.chains, per_chain)

    for k, v in kappa_rec.items():
        diagnostics[f"kappa:{k}"] = (
            effective_sample_size(chains_view(v)),
            split_potential_scale_reduction(chains_view(v)),
        )
    for k, v in rho_rec.items():
        diagnostics[f"rho_star:{k}"] = (
            effective_sample_size(chains_view(v)),
            split_potential_scale_reduction(chains_view(v)),
        )
    for r in range(R):
        v = rec["intercept"][:, r]
        diagnostics[f"intercept:{r}"] = (
            effective_sample_size(chains_view(v)),
            split_potential_scale_reduction(chains_view(v)),
        )

    return PosteriorSamples(
        spec=spec,
        n_ages=I,
        n_periods=J,
        n_strata=R,
        n_cohorts=table.n_cohorts,
        age_period_ratio=table.age_period_ratio,
        intercept=rec["intercept"],
        age=rec["age"],
        period=rec["period"],
        cohort=rec["cohort"],
        overdispersion=rec["overdispersion"],
        kappa=kappa_rec,
        rho_star=rho_rec,
        chain_ids=chain_ids,
        acceptance=acceptance,
        clamp_events=clamp_total,
        diagnostics=diagnostics,
    )
