"""Seeded ground-truth generators for registry count data.

Effects are built from their defining innovations: second differences
drawn independently across time (correlated across strata where the
family says so), integrated twice, then projected onto the family's
identifiability constraints, which leaves the second differences
untouched.  Counts are Poisson given exposure times the true rate.

Draw order is fixed (age, period, cohort, overdispersion innovations,
then counts) so a seed pins the whole dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gmrf import Equicorrelation
from .model import ApcModelSpec, RegistryTable, cohort_index_grid, project_constraint

_DEFAULT_KAPPA = {
    "age": 200.0,
    "period": 400.0,
    "cohort": 400.0,
    "overdispersion": 800.0,
}
_DEFAULT_RHO = 0.5


@dataclass
class SyntheticTruth:
    """Ground-truth parameters behind a generated table.

    Effect arrays use native layouts: a shared family is a vector, a
    stratum-specific one carries a trailing stratum axis.
    """

    intercept: np.ndarray
    age: np.ndarray
    period: np.ndarray
    cohort: np.ndarray
    overdispersion: np.ndarray
    eta: np.ndarray
    kappa: dict = field(default_factory=dict)
    rho: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def rates(self) -> np.ndarray:
        return np.exp(self.eta)

    def effect(self, family: str) -> np.ndarray:
        return getattr(self, family)

    def second_differences(self, family: str) -> np.ndarray:
        """Identifiable curvature of a time-effect family."""
        return np.diff(self.effect(family), n=2, axis=0)

    def as_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "kappa": dict(self.kappa),
            "rho": dict(self.rho),
        }
        for name in ("intercept", "age", "period", "cohort",
                     "overdispersion", "eta"):
            out[name] = getattr(self, name).tolist()
        return out


def _rw2_path(innovations: np.ndarray) -> np.ndarray:
    """Integrate second differences twice, starting the path at zero."""
    first = np.concatenate([np.zeros((1,) + innovations.shape[1:]),
                            np.cumsum(innovations, axis=0)])
    return np.concatenate([np.zeros((1,) + innovations.shape[1:]),
                           np.cumsum(first, axis=0)])


def _family_innovations(rng, n, n_strata, mode, kappa, rho):
    scale = 1.0 / np.sqrt(kappa)
    if mode == "shared":
        return scale * rng.standard_normal(n - 2)
    draws = rng.standard_normal((n - 2, n_strata))
    if mode == "correlated" and n_strata > 1:
        root = np.linalg.cholesky(Equicorrelation(n_strata, rho).matrix())
        draws = draws @ root.T
    return scale * draws


def generate_dataset(
    spec: ApcModelSpec,
    n_ages: int,
    n_periods: int,
    n_strata: int,
    age_period_ratio: int = 1,
    exposure=1e5,
    intercepts=None,
    kappa: dict | None = None,
    rho: dict | None = None,
    seed: int = 0,
) -> tuple[RegistryTable, SyntheticTruth]:
    """Generate a fully observed registry table plus its ground truth.

    ``kappa`` gives each family's innovation precision and ``rho`` the
    across-strata innovation correlation for correlated families;
    anything omitted falls back to module defaults.
    """
    I, J, R, M = n_ages, n_periods, n_strata, age_period_ratio
    if I < 3 or J < 3:
        raise ValueError("need at least 3 ages and 3 periods")
    if R < 1 or M < 1:
        raise ValueError("strata and age-period ratio must be positive")
    K = M * (I - 1) + J
    kappa = {**_DEFAULT_KAPPA, **(kappa or {})}
    rho = {name: rho.get(name, _DEFAULT_RHO) if rho else _DEFAULT_RHO
           for name in ("age", "period", "cohort", "overdispersion")}
    rng = np.random.default_rng(seed)

    if intercepts is None:
        intercepts = np.log(5e-4) + 0.15 * np.arange(R)
    intercepts = np.asarray(intercepts, dtype=float)
    if intercepts.shape != (R,):
        raise ValueError("need one intercept per stratum")

    sizes = {"age": I, "period": J, "cohort": K}
    effects = {}
    for name in ("age", "period", "cohort"):
        cfg = spec.family(name)
        innov = _family_innovations(
            rng, sizes[name], R, cfg.mode, kappa[name], rho[name]
        )
        effects[name] = project_constraint(_rw2_path(innov), cfg.constraint)

    odmode = spec.overdispersion.mode
    kz = kappa["overdispersion"]
    if odmode == "none":
        z = np.zeros((I, J, R))
    elif odmode == "independent" or R == 1:
        z = rng.standard_normal((I, J, R)) / np.sqrt(kz)
    else:
        root = np.linalg.cholesky(Equicorrelation(R, rho["overdispersion"]).matrix())
        z = (rng.standard_normal((I * J, R)) @ root.T).reshape(I, J, R)
        z /= np.sqrt(kz)

    def cells(name):
        e = effects[name]
        if name == "age":
            v = e if e.ndim == 2 else e[:, None]
            return v[:, None, :]
        if name == "period":
            v = e if e.ndim == 2 else e[:, None]
            return v[None, :, :]
        kgrid = cohort_index_grid(I, J, M)
        v = e if e.ndim == 2 else e[:, None]
        return v[kgrid]

    eta = (intercepts[None, None, :] + cells("age") + cells("period")
           + cells("cohort") + z)
    eta = np.broadcast_to(eta, (I, J, R)).copy()

    exposure = np.broadcast_to(np.asarray(exposure, dtype=float), (I, J, R)).copy()
    if np.any(exposure <= 0):
        raise ValueError("exposures must be positive")
    counts = rng.poisson(exposure * np.exp(eta))

    table = RegistryTable(
        counts=counts,
        exposure=exposure,
        observed=np.ones((I, J, R), dtype=bool),
        age_period_ratio=M,
    )
    truth = SyntheticTruth(
        intercept=intercepts,
        age=effects["age"],
        period=effects["period"],
        cohort=effects["cohort"],
        overdispersion=z,
        eta=eta,
        kappa=kappa,
        rho=rho,
        seed=seed,
    )
    return table, truth
