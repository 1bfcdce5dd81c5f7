"""Linear-Gaussian spatial field observed with Gaussian sensor noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import linalg

from ..hmm import LOG_2PI, MetricBundle, StateSpaceModel


class DispersionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class SensorGrid:
    """Planar sensor coordinates, one row per sensor."""

    locations: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim != 2 or loc.shape[1] != 2 or loc.shape[0] < 1:
            raise ValueError(f"locations must have shape (d, 2), got {loc.shape}")
        if not np.all(np.isfinite(loc)):
            raise ValueError("sensor locations must be finite")
        object.__setattr__(self, "locations", loc)

    @property
    def dim(self) -> int:
        return self.locations.shape[0]

    @classmethod
    def square(cls, d: int) -> "SensorGrid":
        """sqrt(d) x sqrt(d) sensors at integer coordinates 1..sqrt(d)."""
        side = math.isqrt(d)
        if side * side != d:
            raise ValueError(f"grid layout needs a perfect-square d, got {d}; supply a location file")
        ii, jj = np.meshgrid(np.arange(1, side + 1), np.arange(1, side + 1), indexing="ij")
        return cls(np.column_stack([ii.ravel(), jj.ravel()]).astype(float))

    @classmethod
    def from_csv(cls, path) -> "SensorGrid":
        """Read a ``k,sx,sy`` CSV; rows are ordered by k."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["k", "sx", "sy"]:
                raise ValueError(f"{path}: expected header 'k,sx,sy'")
            rows = sorted((int(r["k"]), float(r["sx"]), float(r["sy"])) for r in reader)
        return cls(np.array([[sx, sy] for _, sx, sy in rows]))

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "sx", "sy"])
            for k, (sx, sy) in enumerate(self.locations):
                w.writerow([k, repr(float(sx)), repr(float(sy))])

    def squared_distances(self) -> np.ndarray:
        diff = self.locations[:, None, :] - self.locations[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)


class Dispersion(NamedTuple):
    matrix: np.ndarray
    chol: np.ndarray
    jitter: float


def build_dispersion(grid: SensorGrid, alpha0: float, alpha1: float, beta: float) -> Dispersion:
    """
    Squared-exponential dispersion matrix with a nugget:

        Sigma_ij = alpha0 * exp(-||S_i - S_j||^2 / beta) + alpha1 * delta_ij

    A lower Cholesky factor is returned alongside. If factorization fails,
    diagonal jitter 1e-10 * trace/d is added and escalated x10 up to three
    times before giving up.
    """
    if min(alpha0, alpha1, beta) <= 0:
        raise ValueError("alpha0, alpha1 and beta must be positive")
    S = alpha0 * np.exp(-grid.squared_distances() / beta) + alpha1 * np.eye(grid.dim)
    jitter = 0.0
    base = 1e-10 * np.trace(S) / grid.dim
    for attempt in range(4):
        try:
            L = np.linalg.cholesky(S + jitter * np.eye(grid.dim))
            return Dispersion(S + jitter * np.eye(grid.dim), L, jitter)
        except np.linalg.LinAlgError:
            jitter = base * 10.0**attempt
    raise DispersionError(f"dispersion matrix not positive-definite after jitter {jitter:g}")


@dataclass(frozen=True)
class GaussianModelParams:
    alpha: float = 0.9
    sigma_y2: float = 2.0
    alpha0: float = 3.0
    alpha1: float = 0.01
    beta: float = 20.0

    def __post_init__(self):
        if self.sigma_y2 <= 0:
            raise ValueError("sigma_y2 must be positive")
        if self.alpha1 <= 0:
            raise ValueError("alpha1 must be positive")


class LinearGaussianModel(StateSpaceModel):
    """
    x_n = alpha x_{n-1} + w_n,  w_n ~ N(0, Sigma)
    y_n = x_n + v_n,            v_n ~ N(0, sigma_y2 I)

    The metric is the constant Fisher metric I / sigma_y2 + Sigma^{-1}.
    """

    metric_is_constant = True

    def __init__(self, params: GaussianModelParams, grid: SensorGrid, Sigma=None):
        self.params = params
        self.grid = grid
        self.dim = self.obs_dim = grid.dim
        if Sigma is None:
            disp = build_dispersion(grid, params.alpha0, params.alpha1, params.beta)
            Sigma, L = disp.matrix, disp.chol
        else:
            Sigma = np.asarray(Sigma, dtype=float)
            L = np.linalg.cholesky(Sigma)
        self.Sigma = Sigma
        self.chol = L
        Linv = linalg.solve_triangular(L, np.eye(self.dim), lower=True)
        self.precision = Linv.T @ Linv
        self.log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
        self._norm = -0.5 * (self.dim * LOG_2PI + self.log_det)
        s2 = params.sigma_y2
        self._lik_norm = -0.5 * self.dim * (LOG_2PI + math.log(s2))
        self._metric = MetricBundle(np.eye(self.dim) / s2 + self.precision)
        # Optimal-proposal pieces: p(x | y, x_prev) and p(y | x_prev).
        post_prec = self.precision + np.eye(self.dim) / s2
        self._post_chol_prec = np.linalg.cholesky(post_prec)
        self._post_cov = np.linalg.inv(post_prec)
        self._post_cov = 0.5 * (self._post_cov + self._post_cov.T)
        self._post_cov_chol = np.linalg.cholesky(self._post_cov)
        pred = Sigma + s2 * np.eye(self.dim)
        self._pred_chol = np.linalg.cholesky(pred)
        self._pred_logdet = 2.0 * float(np.sum(np.log(np.diag(self._pred_chol))))

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def sigma_y2(self) -> float:
        return self.params.sigma_y2

    def log_transition(self, x, x_prev) -> float:
        r = x - self.alpha * x_prev
        return self._norm - 0.5 * float(r @ self.precision @ r)

    def grad_log_transition(self, x, x_prev) -> np.ndarray:
        return -(self.precision @ (x - self.alpha * x_prev))

    def log_likelihood(self, y, x) -> float:
        r = y - x
        return self._lik_norm - 0.5 * float(r @ r) / self.sigma_y2

    def log_likelihood_terms(self, y, x) -> np.ndarray:
        r = y - x
        return -0.5 * (LOG_2PI + math.log(self.sigma_y2)) - 0.5 * r * r / self.sigma_y2

    def grad_log_likelihood(self, y, x) -> np.ndarray:
        return (y - x) / self.sigma_y2

    def sample_transition(self, x_prev, rng) -> np.ndarray:
        return self.alpha * x_prev + self.chol @ rng.standard_normal(self.dim)

    def sample_observation(self, x, rng) -> np.ndarray:
        return x + math.sqrt(self.sigma_y2) * rng.standard_normal(self.obs_dim)

    def metric(self, x, x_prev, derivatives: bool = True) -> MetricBundle:
        return self._metric

    def transition_mean(self, x_prev) -> np.ndarray:
        return self.alpha * np.asarray(x_prev)

    def transition_covariance(self) -> np.ndarray:
        return self.Sigma

    def sample_conditional_transition(self, x, x_prev, block, rng) -> np.ndarray:
        block = np.asarray(block)
        r = x - self.alpha * x_prev
        P_bb = self.precision[np.ix_(block, block)]
        # Conditional mean offset: r_b - P_bb^{-1} (P r)_b.
        Lb = np.linalg.cholesky(P_bb)
        pr_b = self.precision[block] @ r
        shift = linalg.cho_solve((Lb, True), pr_b)
        mean_b = x[block] - shift
        z = rng.standard_normal(block.size)
        return mean_b + linalg.solve_triangular(Lb, z, lower=True, trans="T")

    # Vectorized paths.

    def sample_transition_batch(self, X_prev, rng) -> np.ndarray:
        Z = rng.standard_normal((X_prev.shape[0], self.dim))
        return self.alpha * X_prev + Z @ self.chol.T

    def log_likelihood_batch(self, y, X) -> np.ndarray:
        R = y - X
        return self._lik_norm - 0.5 * np.einsum("ij,ij->i", R, R) / self.sigma_y2

    def log_likelihood_terms_batch(self, y, X) -> np.ndarray:
        R = y - X
        return -0.5 * (LOG_2PI + math.log(self.sigma_y2)) - 0.5 * R * R / self.sigma_y2

    def log_transition_batch(self, x, X_prev) -> np.ndarray:
        R = x - self.alpha * X_prev
        return self._norm - 0.5 * np.einsum("ij,ij->i", R @ self.precision, R)

    # Closed forms used by the optimal SMCMC kernel.

    def predictive_loglik_batch(self, y, X_prev) -> np.ndarray:
        """log p(y | x_prev) = log N(y; alpha x_prev, Sigma + sigma_y2 I) per row."""
        R = y - self.alpha * np.atleast_2d(X_prev)
        Z = linalg.solve_triangular(self._pred_chol, R.T, lower=True)
        return -0.5 * (self.dim * LOG_2PI + self._pred_logdet) - 0.5 * np.einsum("ij,ij->j", Z, Z)

    def optimal_mean(self, y, x_prev) -> np.ndarray:
        b = self.precision @ (self.alpha * x_prev) + y / self.sigma_y2
        return linalg.cho_solve((self._post_chol_prec, True), b)

    def sample_optimal(self, y, x_prev, rng) -> np.ndarray:
        """Draw from p(x_n | y_n, x_prev)."""
        return self.optimal_mean(y, x_prev) + self._post_cov_chol @ rng.standard_normal(self.dim)
