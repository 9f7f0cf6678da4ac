"""Proper scoring rules and calibration measures for count forecasts.

All functions are pure array arithmetic.  The Dawid-Sebastiani score
(squared standardized error plus twice the log predictive SD) rewards
both calibration and sharpness and is proper for distributions
summarized by their first two moments; MSE measures concentration
only, and empirical coverage checks interval calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "dss",
    "mse",
    "empirical_coverage",
    "cumulative_mean_dss",
    "ScoreReport",
]


def dss(y, mean, sd):
    """Dawid-Sebastiani score ((y - mean)/sd)^2 + 2 log sd, elementwise."""
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0.0):
        raise ValueError("predictive sd must be positive")
    out = ((y - mean) / sd) ** 2 + 2.0 * np.log(sd)
    return out if out.ndim else float(out)


def mse(y, mean) -> float:
    """Mean squared error of point predictions."""
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if y.shape != mean.shape:
        raise ValueError("observation and prediction shapes differ")
    if y.size == 0:
        raise ValueError("empty input")
    return float(np.mean((y - mean) ** 2))


def empirical_coverage(y, lower, upper) -> float:
    """Fraction of observations inside [lower, upper], inclusive."""
    y = np.asarray(y, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if y.shape != lower.shape or y.shape != upper.shape:
        raise ValueError("misaligned interval arrays")
    if y.size == 0:
        raise ValueError("empty input")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    return float(np.mean((y >= lower) & (y <= upper)))


def cumulative_mean_dss(scores: np.ndarray) -> np.ndarray:
    """Cumulative average across periods of per-period mean DSS.

    ``scores`` has shape (n_ages, n_periods) with periods already in
    forecast order (outward from the mask boundary).  Entry p of the
    result is the mean of the per-period means over periods 1..p.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ValueError("expected an (ages, periods) score grid")
    per_period = scores.mean(axis=0)
    return np.cumsum(per_period) / np.arange(1, per_period.size + 1)


@dataclass
class ScoreReport:
    """Scores of one prediction batch on an (ages, periods) grid.

    ``coverage`` maps interval level to the empirical coverage of the
    equal-tailed intervals supplied for that level.  ``cumulative_dss``
    follows the period order of the input grid.
    """

    dss_cells: np.ndarray
    mean_dss: float
    mse: float
    coverage: dict = field(default_factory=dict)
    per_period_dss: np.ndarray | None = None
    cumulative_dss: np.ndarray | None = None

    @classmethod
    def build(cls, y, mean, sd, intervals=None) -> "ScoreReport":
        """Score observations against moments and optional intervals.

        ``intervals`` maps level -> (lower, upper) arrays aligned with
        ``y``.  Inputs are (ages, periods) grids in forecast order.
        """
        y = np.asarray(y, dtype=float)
        cells = dss(y, mean, sd)
        coverage = {}
        if intervals:
            for level, (lo, hi) in sorted(intervals.items()):
                coverage[level] = empirical_coverage(y, lo, hi)
        report = cls(
            dss_cells=cells,
            mean_dss=float(cells.mean()),
            mse=mse(y, mean),
            coverage=coverage,
        )
        if cells.ndim == 2:
            report.per_period_dss = cells.mean(axis=0)
            report.cumulative_dss = cumulative_mean_dss(cells)
            # the grand mean IS the final cumulative value; share the
            # float so the identity holds exactly, not just to an ulp
            report.mean_dss = float(report.cumulative_dss[-1])
        return report
