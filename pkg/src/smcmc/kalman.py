"""Exact filtering for the linear-Gaussian model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def anchor(cls, d: int) -> "GaussianBelief":
        """Point mass at the zero anchor; predicting from it gives N(0, Sigma)."""
        return cls(np.zeros(d), np.zeros((d, d)))


def kalman_predict(belief: GaussianBelief, alpha: float, Sigma) -> GaussianBelief:
    return GaussianBelief(alpha * belief.mean, alpha * alpha * belief.cov + Sigma)


def kalman_update(pred: GaussianBelief, y, sigma_y2: float) -> GaussianBelief:
    """
    Update with y = x + v, v ~ N(0, sigma_y2 I), using the Joseph form
    (I - K) P (I - K)^T + sigma_y2 K K^T and symmetrizing afterwards.
    """
    d = pred.mean.size
    P = pred.cov
    S = P + sigma_y2 * np.eye(d)
    try:
        cS = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is singular") from exc
    K = linalg.cho_solve(cS, P).T  # P S^{-1}; S and P symmetric
    mean = pred.mean + K @ (np.asarray(y, dtype=float) - pred.mean)
    IK = np.eye(d) - K
    cov = IK @ P @ IK.T + sigma_y2 * (K @ K.T)
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def kalman_step(belief: GaussianBelief, y, params, Sigma) -> GaussianBelief:
    """One predict/update cycle. ``params`` needs ``alpha`` and ``sigma_y2``."""
    return kalman_update(kalman_predict(belief, params.alpha, Sigma), y, params.sigma_y2)


def kalman_filter(ys, params, Sigma):
    """
    Filter a (T, d) observation array from the zero anchor.

    Returns:
        means (T, d) and covariances (T, d, d)
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    T, d = ys.shape
    belief = GaussianBelief.anchor(d)
    means = np.empty((T, d))
    covs = np.empty((T, d, d))
    for n in range(T):
        belief = kalman_step(belief, ys[n], params, Sigma)
        means[n] = belief.mean
        covs[n] = belief.cov
    return means, covs
