"""Gaussian Markov random field building blocks.

This module provides the precision-matrix algebra used by the smoothing
priors of the age-period-cohort model:

* second-order random walk (RW2) structure and precision matrices,
* equicorrelation matrices with closed-form inverse and determinant,
* Kronecker-product precisions coupling several strata,
* log densities of (possibly intrinsic) GMRFs in canonical form,
* exact sampling from GMRFs subject to hard linear constraints.

Intrinsic precisions are rank deficient; their generalized log
determinant (sum of log nonzero eigenvalues) is carried alongside the
matrix so densities never require a runtime eigendecomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = [
    "SparsePrecision",
    "Equicorrelation",
    "LinearConstraintSet",
    "rw2_structure",
    "rw2_generalized_logdet",
    "rw2_precision",
    "kronecker_precision",
    "gmrf_log_density",
    "sum_to_zero_constraint",
    "zero_linear_trend_constraint",
    "stacked_block_constraints",
    "sample_constrained_dense",
    "sample_constrained_gmrf",
]

# Relative diagonal jitter used only inside Cholesky factorizations of
# intrinsic precisions.  Its effect is removed by the constraint
# correction, which conditions exactly on the constraint subspace.
_FACTORIZATION_JITTER = 1e-8


@dataclass
class SparsePrecision:
    """A symmetric positive semidefinite precision matrix.

    Attributes
    ----------
    dimension : int
        Size of the (square) matrix.
    matrix : scipy.sparse.csc_matrix
        The precision coefficients in compressed sparse column form.
    rank_deficiency : int
        Dimension of the null space (0 for a proper precision).
    log_generalized_determinant : float
        Sum of the logs of the nonzero eigenvalues.
    """

    dimension: int
    matrix: sp.csc_matrix
    rank_deficiency: int
    log_generalized_determinant: float

    def __post_init__(self) -> None:
        if self.dimension <= 0:
            raise ValueError("precision dimension must be positive")
        if self.matrix.shape != (self.dimension, self.dimension):
            raise ValueError("precision matrix shape does not match dimension")
        if not (0 <= self.rank_deficiency <= self.dimension):
            raise ValueError("rank deficiency outside [0, dimension]")

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def quadratic_form(self, x: np.ndarray) -> float:
        """Evaluate x' Q x for a vector x of matching length."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise ValueError(
                f"vector length {x.shape} does not match precision "
                f"dimension {self.dimension}"
            )
        return float(x @ (self.matrix @ x))


@dataclass(frozen=True)
class Equicorrelation:
    """Correlation matrix with a single shared off-diagonal value.

    C = (1 - rho) I + rho 11' for ``dim`` components.  C is positive
    definite exactly when rho lies in the open interval
    (-1/(dim-1), 1); construction outside that interval raises.

    The inverse and determinant have closed forms, used throughout so
    correlation updates never invert matrices numerically:

    * inverse diagonal   a = -((dim-2) rho + 1) / ((rho-1)((dim-1) rho + 1))
    * inverse off-diag   b = rho / ((rho-1)((dim-1) rho + 1))
    * determinant        (1 + (dim-1) rho) (1 - rho)^(dim-1)
    """

    dim: int
    rho: float

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ValueError("equicorrelation needs at least two components")
        lo = -1.0 / (self.dim - 1)
        if not (lo < self.rho < 1.0):
            raise ValueError(
                f"rho={self.rho} outside positive-definite interval "
                f"({lo}, 1) for dim={self.dim}"
            )

    def matrix(self) -> np.ndarray:
        R = self.dim
        return (1.0 - self.rho) * np.eye(R) + self.rho * np.ones((R, R))

    def inverse(self) -> np.ndarray:
        R, rho = self.dim, self.rho
        denom = (rho - 1.0) * ((R - 1.0) * rho + 1.0)
        a = -((R - 2.0) * rho + 1.0) / denom
        b = rho / denom
        return (a - b) * np.eye(R) + b * np.ones((R, R))

    def log_det(self) -> float:
        R, rho = self.dim, self.rho
        return float(np.log1p((R - 1.0) * rho) + (R - 1.0) * np.log1p(-rho))


def rw2_structure(n: int) -> sp.csc_matrix:
    """Structure matrix of a second-order random walk on n points.

    Returns D'D where D is the (n-2) x n second-difference operator.
    The result is pentadiagonal with rows (1, -2, 1), (-2, 5, -4, 1),
    (1, -4, 6, -4, 1), ..., has rank n - 2, and its null space is
    spanned by the constant and linear vectors.
    """
    if n < 3:
        raise ValueError("second-order random walk needs at least 3 points")
    diffs = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n))
    return (diffs.T @ diffs).tocsc()


def rw2_generalized_logdet(n: int, kappa: float) -> float:
    """Generalized log determinant of kappa * rw2_structure(n).

    The product of the n-2 nonzero eigenvalues of the RW2 structure
    matrix is n^2 (n^2 - 1) / 12 (equal to det(D D') by Cauchy-Binet),
    so no eigendecomposition is needed.
    """
    n2 = float(n) * float(n)
    return (n - 2) * np.log(kappa) + np.log(n2 * (n2 - 1.0) / 12.0)


def rw2_precision(n: int, kappa: float) -> SparsePrecision:
    """Intrinsic RW2 precision kappa * D'D with analytic metadata."""
    if kappa <= 0:
        raise ValueError("precision scale kappa must be positive")
    return SparsePrecision(
        dimension=n,
        matrix=(kappa * rw2_structure(n)).tocsc(),
        rank_deficiency=2,
        log_generalized_determinant=rw2_generalized_logdet(n, kappa),
    )


def kronecker_precision(
    corr: Equicorrelation, struct: SparsePrecision
) -> SparsePrecision:
    """Precision C^{-1} (x) P coupling R strata through one correlation.

    The stacked vector is stratum-major: component r occupies the
    contiguous block [r*n, (r+1)*n).  Block (r, s) of the result is
    (C^{-1})_{rs} * P, so the quadratic form is
    sum_{r,s} (C^{-1})_{rs} x_r' P x_s.

    Rank deficiency multiplies (R times the structure deficiency) and
    the generalized log determinant factorizes as
    (n - d) * (-log det C) + R * glogdet(P) with d the structure
    deficiency, because nonzero eigenvalues of the Kronecker product
    are all products of eigenvalues of the factors.
    """
    R = corr.dim
    n = struct.dimension
    d = struct.rank_deficiency
    mat = sp.kron(sp.csc_matrix(corr.inverse()), struct.matrix, format="csc")
    lgd = (n - d) * (-corr.log_det()) + R * struct.log_generalized_determinant
    return SparsePrecision(
        dimension=R * n,
        matrix=mat,
        rank_deficiency=R * d,
        log_generalized_determinant=lgd,
    )


def gmrf_log_density(x: np.ndarray, prec: SparsePrecision) -> float:
    """Log density of a zero-mean GMRF up to the 2*pi constant.

    Returns 0.5 * log_generalized_determinant - 0.5 * x' Q x, valid
    for proper and intrinsic precisions alike.  The dimension-dependent
    (2*pi)^{-(n-d)/2} factor is omitted; it cancels in every ratio the
    sampler forms because n and d are fixed within a model.
    """
    return 0.5 * prec.log_generalized_determinant - 0.5 * prec.quadratic_form(x)


@dataclass
class LinearConstraintSet:
    """Hard linear constraints A x = e with linearly independent rows."""

    matrix: np.ndarray
    rhs: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if self.rhs is None:
            self.rhs = np.zeros(self.matrix.shape[0])
        self.rhs = np.asarray(self.rhs, dtype=float).ravel()
        if self.rhs.shape[0] != self.matrix.shape[0]:
            raise ValueError("constraint rhs length does not match row count")
        if np.linalg.matrix_rank(self.matrix) < self.matrix.shape[0]:
            raise ValueError("constraint rows are linearly dependent")

    @property
    def n_constraints(self) -> int:
        return self.matrix.shape[0]


def sum_to_zero_constraint(n: int) -> np.ndarray:
    """Single constraint row forcing the components to sum to zero."""
    return np.ones((1, n))


def zero_linear_trend_constraint(n: int) -> np.ndarray:
    """Constraint row removing the centered linear trend component."""
    t = np.arange(n, dtype=float)
    return (t - t.mean())[None, :]


def stacked_block_constraints(rows: np.ndarray, n_blocks: int) -> np.ndarray:
    """Apply per-block constraint rows to each block of a stacked vector.

    ``rows`` has shape (k, n); the result has shape (k * n_blocks,
    n * n_blocks) and constrains every contiguous length-n block
    separately (stratum-major stacking).
    """
    return np.kron(np.eye(n_blocks), rows)


def sample_constrained_dense(
    b: np.ndarray,
    Q: np.ndarray,
    jitter: bool,
    A: np.ndarray | None,
    rhs: np.ndarray | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Dense workhorse behind :func:`sample_constrained_gmrf`.

    Draws from exp(-0.5 x'Qx + b'x) conditioned on A x = rhs.  ``Q`` is
    a dense array the caller may discard (it is not modified).  With
    ``jitter`` a relative 1e-8 diagonal is added before factorization;
    callers must then pass constraints that remove any null space.
    """
    n = b.shape[0]
    if jitter:
        scale = np.max(np.abs(Q.diagonal()))
        Q = Q + (_FACTORIZATION_JITTER * scale) * np.eye(n)
    try:
        upper = sla.cholesky(Q, lower=False)
    except sla.LinAlgError as err:
        raise np.linalg.LinAlgError(
            "precision not positive definite; the conditional is improper "
            "for this update"
        ) from err
    mean = sla.cho_solve((upper, False), b)
    x = mean + sla.solve_triangular(upper, rng.standard_normal(n), lower=False)
    if A is not None:
        W = sla.cho_solve((upper, False), A.T)
        resid = A @ x - (0.0 if rhs is None else rhs)
        x = x - W @ np.linalg.solve(A @ W, resid)
    return x


def sample_constrained_gmrf(
    b: np.ndarray,
    prec: SparsePrecision,
    constraints: LinearConstraintSet | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw from a canonical-form GMRF subject to hard linear constraints.

    The target density is proportional to exp(-0.5 x' Q x + b' x),
    conditioned on A x = e when constraints are given.  Q together with
    the constraints must identify a proper distribution; for intrinsic
    Q the constraint rows have to remove the null space.

    A relative diagonal jitter of 1e-8 is added before factorizing an
    intrinsic Q.  The subsequent conditioning step ("conditioning by
    kriging") is exact, so the jitter only stabilizes the factorization
    and does not bias the constrained law.

    Returns one draw; constraint residuals are zero to machine
    precision (tested at 1e-10).
    """
    b = np.asarray(b, dtype=float).ravel()
    n = prec.dimension
    if b.shape[0] != n:
        raise ValueError("canonical mean vector length does not match precision")
    jitter = prec.rank_deficiency > 0
    if jitter and (
        constraints is None or constraints.n_constraints < prec.rank_deficiency
    ):
        raise ValueError(
            "intrinsic precision needs constraints spanning its null space"
        )
    A = None if constraints is None else constraints.matrix
    rhs = None if constraints is None else constraints.rhs
    return sample_constrained_dense(b, prec.dense(), jitter, A, rhs, rng)
