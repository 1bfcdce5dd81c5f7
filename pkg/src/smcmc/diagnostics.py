"""Chain and estimator diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

LOG_FLOOR = -20.0


def initial_monotone_sum(rho) -> Tuple[float, int]:
    """
    Geyer's initial monotone sequence over an autocorrelation sequence
    ``rho`` with rho[0] = 1.

    Pairs G_m = rho[2m] + rho[2m+1] are summed while positive, each clipped
    to the smallest earlier pair.

    Returns:
        (sum of the retained pairs, number of retained pairs)
    """
    rho = np.asarray(rho, dtype=float)
    n_pairs = rho.size // 2
    pairs = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    total = 0.0
    running = math.inf
    m = 0
    for m_, g in enumerate(pairs):
        if not g > 0.0:
            break
        running = min(running, g)
        total += running
        m = m_ + 1
    return total, m


def autocorrelation(x, max_lag: int) -> np.ndarray:
    """
    Biased sample autocorrelations rho[0..max_lag] by direct sums, computed
    for every column of ``x`` at once. Shape (max_lag + 1, d).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N = x.shape[0]
    xc = x - x.mean(axis=0)
    gam = np.empty((max_lag + 1, x.shape[1]))
    for k in range(max_lag + 1):
        gam[k] = np.einsum("ij,ij->j", xc[: N - k], xc[k:]) / N
    with np.errstate(invalid="ignore", divide="ignore"):
        return gam / gam[0]


def chain_ess(samples, return_pairs: bool = False):
    """
    Effective sample size N / (1 + 2 sum_k rho(k)) with the autocorrelation
    sum truncated by the initial monotone positive-pair rule.

    ``samples`` is a chain of shape (N,) or (N, d); for 2-D input the ESS of
    every column is returned. Values are capped at N. A constant column gets
    ESS 0 and a logged warning.
    """
    x = np.asarray(samples, dtype=float)
    one_d = x.ndim == 1
    if one_d:
        x = x[:, None]
    N, d = x.shape
    if N < 10:
        raise ValueError(f"chain_ess needs at least 10 samples, got {N}")
    degenerate = np.ptp(x, axis=0) == 0
    ess = np.zeros(d)
    npairs = np.zeros(d, dtype=int)
    todo = np.flatnonzero(~degenerate)
    # Extend the lag window until every column's positive-pair sequence has
    # stopped (or lag N/2 is reached); the result equals the full computation.
    lag = min(64, N // 2)
    while todo.size:
        rho = autocorrelation(x[:, todo], lag)
        full = lag >= N // 2
        left = []
        for c, j in enumerate(todo):
            s, m = initial_monotone_sum(rho[:, c])
            if m == rho.shape[0] // 2 and not full:
                left.append(j)
                continue
            npairs[j] = m
            tau = 2.0 * s - 1.0
            ess[j] = min(N / tau, float(N)) if tau > 0 else float(N)
        todo = np.array(left, dtype=int)
        lag = min(2 * lag, N // 2)
    if np.any(degenerate):
        log.warning("chain_ess: %d degenerate (constant) dimension(s)", int(degenerate.sum()))
    if one_d:
        return (float(ess[0]), int(npairs[0])) if return_pairs else float(ess[0])
    return (ess, npairs) if return_pairs else ess


def is_degenerate(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    return np.ptp(x, axis=0) == 0


def ess_summary(ess) -> Tuple[float, float, float, float]:
    """(min, median, mean, max) across dimensions."""
    e = np.asarray(ess, dtype=float)
    return float(e.min()), float(np.median(e)), float(e.mean()), float(e.max())


def posterior_summary(states) -> Tuple[np.ndarray, np.ndarray]:
    """Per-dimension sample mean and unbiased variance of a bank (N, d)."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty bank")
    mean = X.mean(axis=0)
    var = X.var(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
    return mean, var


def log_relative_mse(estimates, oracle_means, oracle_vars, form: str = "excess") -> float:
    """
    Log MSE of the estimator relative to the exact filter.

    With ``dev`` the mean squared deviation of ``estimates`` from the exact
    posterior means and ``v`` the mean exact posterior variance (both
    averaged over every dimension and time step):

    - ``"excess"``: log((v + dev) / v), the log ratio of the estimator's
      expected squared error about the true state to that of the exact
      posterior mean. Zero for a perfect estimator.
    - ``"deviation"``: log(dev / v), floored at -20.

    Raises:
        ValueError: if the oracle is missing
    """
    if oracle_means is None or oracle_vars is None:
        raise ValueError("log_relative_mse needs exact posterior means and variances")
    est = np.asarray(estimates, dtype=float)
    m = np.asarray(oracle_means, dtype=float)
    v = float(np.mean(np.asarray(oracle_vars, dtype=float)))
    if est.shape != m.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {m.shape}")
    dev = float(np.mean((est - m) ** 2))
    if form == "excess":
        return math.log((v + dev) / v)
    if form == "deviation":
        if dev == 0.0:
            return LOG_FLOOR
        return max(math.log(dev / v), LOG_FLOOR)
    raise ValueError(f"unknown form {form!r}")


def mse_per_sensor(estimates, truth) -> float:
    """Squared error of estimates vs the simulated state, averaged over all entries."""
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
    return float(np.mean((e - t) ** 2))


@dataclass
class ChainDiagnostics:
    """
    Per-time-step record. Acceptance rates are NaN for stages an algorithm
    does not have.

    ``unique_ancestors`` counts distinct states carried forward as the next
    step's ancestor set; ``parent_indices`` counts distinct previous-step
    indices used by the retained samples.
    """

    accept_joint: float = float("nan")
    accept_refine: float = float("nan")
    accept_kernel: float = float("nan")
    ess: Optional[np.ndarray] = None
    weight_ess: float = float("nan")
    unique_ancestors: int = 0
    parent_indices: int = 0
    n_iterations: int = 0
    wall_s: float = 0.0
    eps: float = float("nan")
    extra: dict = field(default_factory=dict)

    def ess_stats(self) -> Tuple[float, float, float, float]:
        if self.ess is None:
            nan = float("nan")
            return nan, nan, nan, nan
        return ess_summary(self.ess)


def count_unique_rows(X) -> int:
    X = np.ascontiguousarray(np.atleast_2d(X))
    return int(np.unique(X.view(np.dtype((np.void, X.dtype.itemsize * X.shape[1])))).size)
