"""Convergence diagnostics: effective sample size and split-chain PSRF."""

from __future__ import annotations

import numpy as np
from scipy.fft import next_fast_len, irfft, rfft

__all__ = ["effective_sample_size", "split_potential_scale_reduction"]


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of one chain at lags 0..n-1 via FFT."""
    n = x.shape[0]
    x = x - x.mean()
    nfft = next_fast_len(2 * n)
    f = rfft(x, nfft)
    acov = irfft(f * np.conj(f), nfft)[:n]
    return acov / n


def effective_sample_size(chains: np.ndarray) -> float:
    """Effective sample size of stacked chains, shape (n_chains, n).

    Combines within- and between-chain variance the way split-R-hat
    does, then truncates the autocorrelation sum with Geyer's initial
    monotone positive pair sequence.  Returns nan for constant chains.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    C, N = x.shape
    if N < 4:
        return float("nan")
    acov = np.array([_autocovariance(x[c]) for c in range(C)])
    chain_var = acov[:, 0] * N / (N - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (N - 1.0) / N
    if C > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0 or not np.isfinite(var_plus):
        return float("nan")
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus

    # Geyer: sum consecutive pairs while positive, enforcing monotone
    # decrease, starting with (rho_0 + rho_1).
    max_pairs = (N - 1) // 2
    tau = -1.0
    prev_pair = np.inf
    for t in range(max_pairs):
        pair = rho[2 * t] + rho[2 * t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        tau += 2.0 * pair
    tau = max(tau, 1.0 / np.log10(N + 10.0))  # guard against tiny tau
    return float(C * N / tau)


def split_potential_scale_reduction(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction factor (R-hat).

    Each chain is split in half so a single chain still yields a
    meaningful statistic.  Returns 1.0 when all halves are constant.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    C, N = x.shape
    half = N // 2
    if half < 2:
        return float("nan")
    halves = np.concatenate([x[:, :half], x[:, N - half :]], axis=0)
    m, n = halves.shape
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 1e-300:
        return 1.0 if B <= 1e-300 else float("inf")
    var_plus = (n - 1.0) / n * W + B / n
    return float(np.sqrt(var_plus / W))
