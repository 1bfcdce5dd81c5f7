"""
Generalized hyperbolic (GH) spatial dynamics with Poisson count sensors.

The GH law is the normal mean-variance mixture

    X = mu + gamma W + sqrt(W) L Z,   W ~ GIG(lambda, chi, psi),  Z ~ N(0, I)

with L L^T = Sigma. The skewed-t member is lambda = -nu/2, chi = nu, psi -> 0,
where W is inverse-gamma(nu/2, nu/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, special

from ..hmm import LOG_2PI, MetricBundle, ModelEvaluationError, StateSpaceModel
from .gaussian import SensorGrid, build_dispersion

PSI_ZERO = 1e-12  # below this psi is treated as the skewed-t limit
_EXP_MAX = 700.0


# Bessel K in log scale.


def _log_cosh(u):
    u = np.abs(u)
    return u + np.log1p(np.exp(-2.0 * u)) - math.log(2.0)


def _log_bessel_k_quad(v: float, z: float, n: int = 4001) -> float:
    # K_v(z) = int_0^inf exp(-z cosh t) cosh(v t) dt, integrated around its peak.
    t_peak = math.asinh(v / z) if v > 0 else 0.0
    w = min((z * z + v * v) ** -0.25, 1.0)
    t = np.linspace(max(0.0, t_peak - 40.0 * w), t_peak + 40.0 * w, n)
    with np.errstate(over="ignore"):
        h = -z * np.cosh(t) + _log_cosh(v * t)
    h[0] -= math.log(2.0)
    h[-1] -= math.log(2.0)
    return float(special.logsumexp(h) + math.log(t[1] - t[0]))


def log_bessel_k(v, z):
    """
    log K_v(z), the modified Bessel function of the second kind.

    Uses the exponentially scaled ``kve``; where that overflows (large order,
    small argument) falls back to quadrature of the integral representation
    in log space. Accepts scalars or broadcastable arrays.
    """
    v = np.abs(np.asarray(v, dtype=float))
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0) or np.any(~np.isfinite(z)):
        bad = z[(z <= 0) | ~np.isfinite(z)] if z.ndim else z
        raise ModelEvaluationError(f"Bessel K argument out of range: |z| = {np.max(np.abs(bad)):g}", "bessel")
    with np.errstate(all="ignore"):
        out = np.log(special.kve(v, z)) - z
    if not np.all(np.isfinite(out)):
        vb, zb = np.broadcast_arrays(v, z)
        out = np.array(out, dtype=float, copy=True).reshape(vb.shape)
        for idx in zip(*np.nonzero(~np.isfinite(out))) if out.ndim else [()]:
            val = _log_bessel_k_quad(float(vb[idx]), float(zb[idx]))
            if not math.isfinite(val):
                raise ModelEvaluationError(
                    f"log K_{float(vb[idx]):g}(z) not representable at z = {float(zb[idx]):g}", "bessel"
                )
            out[idx] = val
    return float(out) if out.ndim == 0 else out


# Parameters.


@dataclass(frozen=True, eq=False)
class GHParams:
    """
    GH transition parameters. ``lam`` is the GIG index lambda; the location
    at time n is ``alpha * x_prev``.
    """

    lam: float
    chi: float
    psi: float
    gamma: np.ndarray
    Sigma: np.ndarray
    alpha: float = 0.9

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape != (g.size, g.size):
            raise ValueError(f"Sigma shape {S.shape} does not match gamma length {g.size}")
        if not np.allclose(S, S.T):
            raise ValueError("Sigma must be symmetric")
        if self.chi <= 0 or self.psi < 0:
            raise ValueError("need chi > 0 and psi >= 0")
        if self.psi < PSI_ZERO and self.lam >= 0:
            raise ValueError("the psi -> 0 limit requires lambda < 0")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "Sigma", S)

    @classmethod
    def skewed_t(cls, nu: float, gamma, Sigma, alpha: float = 0.9) -> "GHParams":
        return cls(lam=-nu / 2.0, chi=float(nu), psi=0.0, gamma=gamma, Sigma=Sigma, alpha=alpha)

    @property
    def dim(self) -> int:
        return self.gamma.size

    @property
    def is_skewed_t(self) -> bool:
        return self.psi < PSI_ZERO and math.isclose(-2.0 * self.lam, self.chi)

    @property
    def nu(self) -> float:
        if not self.is_skewed_t:
            raise ValueError("nu is defined only for the skewed-t member")
        return self.chi


@dataclass(frozen=True)
class PoissonObsParams:
    m1: float = 1.0
    m2: float = 1.0 / 3.0

    def __post_init__(self):
        if self.m1 <= 0 or self.m2 == 0:
            raise ValueError("need m1 > 0 and m2 != 0")


# GH density, gradient and sampling.


class GHDistribution:
    """GH law with factorizations cached; location passed per call."""

    def __init__(self, p: GHParams):
        self.p = p
        self.dim = d = p.dim
        try:
            self.chol = np.linalg.cholesky(p.Sigma)
        except np.linalg.LinAlgError as exc:
            raise ModelEvaluationError("GH dispersion is not positive-definite", "Sigma") from exc
        Linv = linalg.solve_triangular(self.chol, np.eye(d), lower=True)
        self.precision = Linv.T @ Linv
        self.log_det = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        self.Pg = self.precision @ p.gamma
        self.s = float(p.gamma @ self.Pg)
        self.eta = d / 2.0 - p.lam  # order of the Bessel term in the density
        self.limit = p.psi < PSI_ZERO
        if self.limit:
            a = -p.lam
            self._const = (
                -0.5 * d * LOG_2PI - 0.5 * self.log_det + a * math.log(p.chi / 2.0) - math.lgamma(a)
            )
        else:
            omega = math.sqrt(p.chi * p.psi)
            b = p.psi + self.s
            self._const = (
                -p.lam * math.log(omega)
                + p.lam * math.log(p.psi)
                + self.eta * math.log(b)
                - 0.5 * d * LOG_2PI
                - 0.5 * self.log_det
                - log_bessel_k(p.lam, omega)
            )

    def _log_bessel_part(self, Q):
        """log of the Q-dependent Bessel factor, vectorized over Q."""
        chi, eta = self.p.chi, self.eta
        A = chi + Q
        if self.limit:
            if self.s == 0.0:
                return math.lgamma(eta) - eta * np.log(A / 2.0)
            z = np.sqrt(A * self.s)
            return math.log(2.0) - 0.5 * eta * (np.log(A) - math.log(self.s)) + log_bessel_k(eta, z)
        z = np.sqrt(A * (self.p.psi + self.s))
        return log_bessel_k(eta, z) - eta * np.log(z)

    def logpdf(self, x, mu) -> float:
        r = np.asarray(x, dtype=float) - mu
        u = self.precision @ r
        return float(self._const + r @ self.Pg + self._log_bessel_part(float(r @ u)))

    def logpdf_batch(self, R) -> np.ndarray:
        """Log-density at residuals R = X - mu, one per row."""
        U = R @ self.precision
        Q = np.einsum("ij,ij->i", U, R)
        return self._const + R @ self.Pg + self._log_bessel_part(Q)

    def grad_logpdf(self, x, mu) -> np.ndarray:
        r = np.asarray(x, dtype=float) - mu
        u = self.precision @ r
        A = self.p.chi + float(r @ u)
        b = self.p.psi + self.s if not self.limit else self.s
        if b == 0.0:
            return -2.0 * self.eta * u / A + self.Pg
        z = math.sqrt(A * b)
        # d/dz log K_eta = -K_{eta-1}/K_eta - eta/z
        ratio = math.exp(log_bessel_k(self.eta - 1.0, z) - log_bessel_k(self.eta, z))
        return -(b / z) * (ratio + 2.0 * self.eta / z) * u + self.Pg

    def sample_mixing(self, rng, size=None):
        p = self.p
        if self.limit:
            # inverse-gamma(-lambda, chi/2)
            return (p.chi / 2.0) / rng.gamma(-p.lam, 1.0, size=size)
        if size is None:
            return sample_gig(p.lam, p.chi, p.psi, rng)
        return np.array([sample_gig(p.lam, p.chi, p.psi, rng) for _ in range(int(np.prod(size)))]).reshape(size)

    def sample(self, mu, rng) -> np.ndarray:
        W = self.sample_mixing(rng)
        return mu + self.p.gamma * W + math.sqrt(W) * (self.chol @ rng.standard_normal(self.dim))

    def sample_batch(self, Mu, rng) -> np.ndarray:
        n = Mu.shape[0]
        W = self.sample_mixing(rng, size=n)
        Z = rng.standard_normal((n, self.dim)) @ self.chol.T
        return Mu + W[:, None] * self.p.gamma + np.sqrt(W)[:, None] * Z

    def sample_conditional(self, x, mu, block, rng) -> np.ndarray:
        """
        Draw x[block] given the other coordinates. The conditional law is GH
        with lambda - d_r/2, chi + Q_r, psi + s_r and block-conditional
        location, skewness and dispersion P_bb^{-1}.
        """
        p = self.p
        block = np.asarray(block)
        r = x - mu
        u = self.precision @ r
        Q = float(r @ u)
        P_bb = self.precision[np.ix_(block, block)]
        Lb = np.linalg.cholesky(P_bb)
        # Conditional location shift and skewness in precision form.
        m_b = x[block] - linalg.cho_solve((Lb, True), u[block])
        g_b = linalg.cho_solve((Lb, True), self.Pg[block])
        e = x[block] - m_b
        Q_r = max(Q - float(e @ P_bb @ e), 0.0)
        s_r = max(self.s - float(g_b @ P_bb @ g_b), 0.0)
        lam_c = p.lam - (self.dim - block.size) / 2.0
        chi_c = p.chi + Q_r
        psi_c = (0.0 if self.limit else p.psi) + s_r
        if psi_c < PSI_ZERO:
            W = (chi_c / 2.0) / rng.gamma(-lam_c, 1.0)
        else:
            W = sample_gig(lam_c, chi_c, psi_c, rng)
        z = rng.standard_normal(block.size)
        return m_b + g_b * W + math.sqrt(W) * linalg.solve_triangular(Lb, z, lower=True, trans="T")


def gh_logpdf(x, mu, p: GHParams) -> float:
    """Normalized GH log-density at x with location mu."""
    return GHDistribution(p).logpdf(x, mu)


def grad_gh_logpdf(x, mu, p: GHParams) -> np.ndarray:
    """Gradient of :func:`gh_logpdf` with respect to x."""
    return GHDistribution(p).grad_logpdf(x, mu)


def sample_gh(mu, p: GHParams, rng) -> np.ndarray:
    return GHDistribution(p).sample(np.asarray(mu, dtype=float), rng)


def skewed_t_covariance(p: GHParams) -> np.ndarray:
    """
    Covariance of the skewed-t member:
    nu/(nu-2) Sigma + nu^2 / ((2nu-8)(nu/2-1)^2) gamma gamma^T.
    """
    nu = p.nu
    if nu <= 4:
        raise ValueError(f"skewed-t covariance needs nu > 4, got {nu}")
    g = p.gamma
    return nu / (nu - 2.0) * p.Sigma + nu**2 / ((2.0 * nu - 8.0) * (nu / 2.0 - 1.0) ** 2) * np.outer(g, g)


# GIG sampling.


def _gig_standard(lam: float, omega: float, rng) -> float:
    """
    Draw from the density proportional to x^(lam-1) exp(-omega (x + 1/x) / 2)
    for lam >= 0, omega > 0, by Devroye's log-concave rejection scheme.
    """
    alpha = math.sqrt(omega * omega + lam * lam) - lam

    def psi(t):
        return -alpha * (math.cosh(t) - 1.0) - lam * (math.expm1(t) - t)

    def dpsi(t):
        return -alpha * math.sinh(t) - lam * math.expm1(t)

    v = -psi(1.0)
    if 0.5 <= v <= 2.0:
        t = 1.0
    elif v > 2.0:
        t = math.sqrt(2.0 / (alpha + lam))
    else:
        t = math.log(4.0 / (alpha + 2.0 * lam))
    v = -psi(-1.0)
    if 0.5 <= v <= 2.0:
        s = 1.0
    elif v > 2.0:
        s = math.sqrt(4.0 / (alpha * math.cosh(1.0) + lam))
    else:
        inv_lam = 1.0 / lam if lam > 0 else math.inf
        s = min(inv_lam, math.log1p(1.0 / alpha + math.sqrt(1.0 / alpha**2 + 2.0 / alpha)))
    eta, zeta = -psi(t), -dpsi(t)
    theta, xi = -psi(-s), dpsi(-s)
    p, r = 1.0 / xi, 1.0 / zeta
    td = t - r * eta
    sd = s - p * theta
    q = td + sd
    total = p + q + r
    while True:
        U, V, W = rng.random(3)
        if U < q / total:
            X = -sd + q * V
            chi = 1.0
        elif U < (q + r) / total:
            X = td - r * math.log(V)
            chi = math.exp(-eta - zeta * (X - t))
        else:
            X = -sd + p * math.log(V)
            chi = math.exp(-theta + xi * (X + s))
        if W * chi <= math.exp(psi(X)):
            break
    return (lam / omega + math.sqrt(1.0 + (lam / omega) ** 2)) * math.exp(X)


def sample_gig(lam: float, chi: float, psi: float, rng) -> float:
    """
    One draw from GIG(lam, chi, psi) with density proportional to
    x^(lam-1) exp(-(chi/x + psi x)/2), chi > 0 and psi > 0.
    """
    if chi <= 0 or psi <= 0:
        raise ValueError("sample_gig needs chi > 0 and psi > 0")
    omega = math.sqrt(chi * psi)
    scale = math.sqrt(chi / psi)
    if lam >= 0:
        return scale * _gig_standard(lam, omega, rng)
    # 1/X ~ GIG(-lam, omega) in the standard form.
    return scale / _gig_standard(-lam, omega, rng)


# State-space model.


class SkewedTPoissonModel(StateSpaceModel):
    """
    x_n ~ GH(alpha x_{n-1}, ...) with Poisson sensors:
    y_n(k) ~ Poisson(m1 exp(m2 x_n(k))).

    The metric is the Gaussian-approximation metric
    G(x) = diag(m1 m2^2 exp(m2 x)) + Cov[x_n | x_{n-1}]^{-1}.
    """

    metric_is_constant = False

    def __init__(self, gh: GHParams, obs: PoissonObsParams, grid: Optional[SensorGrid] = None):
        if grid is not None and grid.dim != gh.dim:
            raise ValueError(f"grid has {grid.dim} sensors but GH dimension is {gh.dim}")
        self.gh = gh
        self.obs = obs
        self.grid = grid
        self.dim = self.obs_dim = gh.dim
        self.law = GHDistribution(gh)
        self.prior_cov = skewed_t_covariance(gh) if gh.is_skewed_t else None
        if self.prior_cov is None:
            raise ValueError("the Gaussian-approximation metric needs the skewed-t member")
        self.prior_prec = np.linalg.inv(self.prior_cov)
        self.prior_prec = 0.5 * (self.prior_prec + self.prior_prec.T)
        self._log_m1 = math.log(obs.m1)

    @property
    def alpha(self) -> float:
        return self.gh.alpha

    def _log_rate(self, x):
        lr = self._log_m1 + self.obs.m2 * np.asarray(x)
        if np.any(lr > _EXP_MAX):
            raise ModelEvaluationError(f"Poisson mean overflows: log rate {np.max(lr):g}", "log_likelihood")
        return lr

    def log_transition(self, x, x_prev) -> float:
        return self.law.logpdf(x, self.alpha * x_prev)

    def grad_log_transition(self, x, x_prev) -> np.ndarray:
        return self.law.grad_logpdf(x, self.alpha * x_prev)

    def log_likelihood_terms(self, y, x) -> np.ndarray:
        lr = self._log_rate(x)
        return y * lr - np.exp(lr) - special.gammaln(y + 1.0)

    def log_likelihood(self, y, x) -> float:
        return float(np.sum(self.log_likelihood_terms(y, x)))

    def grad_log_likelihood(self, y, x) -> np.ndarray:
        return self.obs.m2 * (y - np.exp(self._log_rate(x)))

    def sample_transition(self, x_prev, rng) -> np.ndarray:
        return self.law.sample(self.alpha * x_prev, rng)

    def sample_observation(self, x, rng) -> np.ndarray:
        return rng.poisson(np.exp(self._log_rate(x))).astype(float)

    def metric(self, x, x_prev, derivatives: bool = True) -> MetricBundle:
        lam = np.exp(self._log_rate(x))
        m2 = self.obs.m2
        G = self.prior_prec.copy()
        G[np.diag_indices(self.dim)] += m2 * m2 * lam
        return MetricBundle(G, dG_diag=m2**3 * lam if derivatives else None)

    def transition_mean(self, x_prev) -> np.ndarray:
        nu = self.gh.nu
        return self.alpha * np.asarray(x_prev) + self.gh.gamma * nu / (nu - 2.0)

    def transition_covariance(self) -> np.ndarray:
        return self.prior_cov

    def sample_conditional_transition(self, x, x_prev, block, rng) -> np.ndarray:
        return self.law.sample_conditional(x, self.alpha * x_prev, block, rng)

    def sample_transition_batch(self, X_prev, rng) -> np.ndarray:
        return self.law.sample_batch(self.alpha * X_prev, rng)

    def log_likelihood_terms_batch(self, y, X) -> np.ndarray:
        lr = self._log_rate(X)
        return y * lr - np.exp(lr) - special.gammaln(y + 1.0)

    def log_likelihood_batch(self, y, X) -> np.ndarray:
        return np.sum(self.log_likelihood_terms_batch(y, X), axis=1)

    def log_transition_batch(self, x, X_prev) -> np.ndarray:
        return self.law.logpdf_batch(x - self.alpha * X_prev)


def poisson_model(gh: GHParams, obs: PoissonObsParams, grid: Optional[SensorGrid] = None) -> SkewedTPoissonModel:
    return SkewedTPoissonModel(gh, obs, grid)


def default_ghcount_model(
    grid: SensorGrid,
    nu: float = 7.0,
    gamma: float = 0.3,
    alpha: float = 0.9,
    alpha0: float = 3.0,
    alpha1: float = 0.01,
    beta: float = 20.0,
    obs: PoissonObsParams = PoissonObsParams(),
) -> SkewedTPoissonModel:
    """Skewed-t/Poisson model on ``grid`` with a constant skewness vector."""
    Sigma = build_dispersion(grid, alpha0, alpha1, beta).matrix
    gh = GHParams.skewed_t(nu, np.full(grid.dim, gamma), Sigma, alpha)
    return SkewedTPoissonModel(gh, obs, grid)
