"""
Gradient-informed MCMC kernels for a conditional target pi~(x).

A target is any object with ``log_prob(x)``, ``grad_log_prob(x)``,
``metric(x, derivatives)`` and ``metric_is_constant`` (see
:class:`smcmc.hmm.ConditionalTarget`). All kernels draw their randomness from
the ``rng`` argument in a fixed order so runs are reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .hmm import LOG_2PI, MetricBundle, ModelEvaluationError

log = logging.getLogger(__name__)

LANGEVIN_BAND = (0.4, 0.7)
HAMILTONIAN_BAND = (0.7, 0.9)


class IntegratorError(ArithmeticError):
    """A leapfrog trajectory produced a non-finite value."""


class FixedPointDivergence(IntegratorError):
    """A generalized-leapfrog fixed-point iteration diverged."""


def _as_bundle(M, dim: Optional[int] = None) -> MetricBundle:
    if isinstance(M, MetricBundle):
        return M
    if M is None:
        return MetricBundle(np.eye(dim))
    M = np.asarray(M, dtype=float)
    return MetricBundle(np.atleast_2d(M))


def gaussian_logpdf_prec(x, mean, bundle: MetricBundle, scale2: float) -> float:
    """log N(x; mean, scale2 * G^{-1}) where G is ``bundle.G``."""
    r = x - mean
    d = r.size
    return -0.5 * d * (LOG_2PI + math.log(scale2)) + 0.5 * bundle.log_det - 0.5 * bundle.quad(r) / scale2


# Langevin proposals.


def _langevin_mean(x, grad, bundle: MetricBundle, eps: float, drift: bool):
    step = bundle.solve(grad)
    if drift and bundle.has_derivatives:
        step = step + bundle.drift()
    return x + 0.5 * eps * eps * step


def _langevin_propose(x, grad_fn, metric_fn, eps, rng, drift):
    g = np.asarray(grad_fn(x))
    if not np.all(np.isfinite(g)):
        raise ModelEvaluationError("non-finite gradient at the current point", "gradient")
    Gx = metric_fn(x)
    mean_x = _langevin_mean(x, g, Gx, eps, drift)
    z = rng.standard_normal(x.size)
    x_star = mean_x + eps * Gx.sqrt_inv_apply(z)
    log_fwd = gaussian_logpdf_prec(x_star, mean_x, Gx, eps * eps)
    g_star = np.asarray(grad_fn(x_star))
    if not np.all(np.isfinite(g_star)):
        return x_star, log_fwd, -np.inf
    G_star = metric_fn(x_star)
    mean_star = _langevin_mean(x_star, g_star, G_star, eps, drift)
    log_rev = gaussian_logpdf_prec(x, mean_star, G_star, eps * eps)
    return x_star, log_fwd, log_rev


def mala_propose(x, grad_log_target: Callable, precond, eps: float, rng) -> Tuple[np.ndarray, float, float]:
    """
    Pre-conditioned MALA proposal x* ~ N(x + eps^2/2 S grad, eps^2 S).

    ``precond`` is either the covariance S as a matrix, or a
    :class:`MetricBundle` whose ``G`` equals S^{-1}. Passing a bundle makes
    the noise ``eps * chol(G)^{-T} z``, which is bitwise identical to the
    manifold proposals under the same constant metric.

    Returns:
        (x_star, log q(x* | x), log q(x | x*))
    """
    x = np.asarray(x, dtype=float)
    bundle = precond if isinstance(precond, MetricBundle) else MetricBundle.from_covariance(precond)
    return _langevin_propose(x, grad_log_target, lambda _: bundle, eps, rng, drift=False)


def smmala_propose(x, target, eps: float, rng) -> Tuple[np.ndarray, float, float]:
    """
    Manifold MALA proposal with the metric drift term; the reverse density is
    evaluated with the metric recomputed at x*.
    """
    x = np.asarray(x, dtype=float)
    return _langevin_propose(
        x, target.grad_log_prob, lambda z: target.metric(z, derivatives=True), eps, rng, drift=True
    )


def simplified_smmala_propose(x, target, eps: float, rng) -> Tuple[np.ndarray, float, float]:
    """Manifold MALA without the drift term; never requests metric derivatives."""
    x = np.asarray(x, dtype=float)
    return _langevin_propose(
        x, target.grad_log_prob, lambda z: target.metric(z, derivatives=False), eps, rng, drift=False
    )


def mh_accept(log_ratio: float, rng) -> bool:
    """Draw one uniform and accept when log(u) < log_ratio."""
    u = rng.random()
    if not log_ratio > -np.inf:  # -inf and NaN reject
        return False
    return log_ratio >= 0.0 or math.log(u) < log_ratio


# Classical leapfrog and HMC.


def leapfrog(x0, q0, grad_U: Callable, M, eps: float, n_steps: int):
    """
    Leapfrog integration of H(x, q) = U(x) + q^T M^{-1} q / 2.

    Each step is a half momentum kick, a full position drift and a second
    half kick.

    Returns:
        (x, q) after ``n_steps`` steps
    """
    bundle = _as_bundle(M, np.size(x0))
    x, q, _ = _leapfrog(np.asarray(x0, float), np.asarray(q0, float), grad_U, bundle, eps, n_steps)
    return x, q


def _leapfrog(x, q, grad_U, bundle, eps, n_steps, g=None):
    if g is None:
        g = np.asarray(grad_U(x), dtype=float)
    for _ in range(n_steps):
        q = q - 0.5 * eps * g
        x = x + eps * bundle.solve(q)
        g = np.asarray(grad_U(x), dtype=float)
        q = q - 0.5 * eps * g
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(q))):
            raise IntegratorError("non-finite value in leapfrog trajectory")
    return x, q, g


@dataclass
class HMCConfig:
    eps: float = 0.1
    n_leapfrog: int = 20
    n_fixed_point: int = 2
    jitter: float = 0.2  # eps drawn uniformly from [(1-j) eps, (1+j) eps]


def _jittered(eps, jitter, rng):
    return eps * rng.uniform(1.0 - jitter, 1.0 + jitter)


def hmc_kernel(x, target, M, cfg: HMCConfig, rng) -> Tuple[np.ndarray, bool]:
    """
    One HMC transition: q ~ N(0, M), a leapfrog trajectory with a jittered
    step size, then a Metropolis test on H = -log pi~(x) + q^T M^{-1} q / 2.

    RNG order: step-size jitter, momentum, acceptance uniform.
    """
    x = np.asarray(x, dtype=float)
    bundle = _as_bundle(M, x.size)
    eps = _jittered(cfg.eps, cfg.jitter, rng)
    q = bundle.chol @ rng.standard_normal(x.size)
    lp = target.log_prob(x)
    H0 = -lp + 0.5 * bundle.inv_quad(q)
    try:
        x1, q1, _ = _leapfrog(x, q, lambda z: -target.grad_log_prob(z), bundle, eps, cfg.n_leapfrog)
        lp1 = target.log_prob(x1)
        H1 = -lp1 + 0.5 * bundle.inv_quad(q1)
    except (IntegratorError, ModelEvaluationError, np.linalg.LinAlgError):
        rng.random()
        return x, False
    if mh_accept(H0 - H1, rng):
        return x1, True
    return x, False


# Manifold HMC.


def hamiltonian_manifold(x, q, log_prob: float, bundle: MetricBundle) -> float:
    """H~(x, q) = -log pi~(x) + log((2 pi)^d |G(x)|)/2 + q^T G(x)^{-1} q / 2."""
    d = x.size
    return -log_prob + 0.5 * (d * LOG_2PI + bundle.log_det) + 0.5 * bundle.inv_quad(q)


def _grad_x_htilde(grad_lp, bundle: MetricBundle, q):
    v = bundle.solve(q)
    return -grad_lp + 0.5 * bundle.trace_terms() - 0.5 * bundle.quad_terms(v)


def _check_fp(deltas, what):
    last = deltas[-1]
    if not math.isfinite(last):
        raise FixedPointDivergence(f"non-finite {what} fixed-point iterate")
    if len(deltas) > 1 and deltas[-2] > 0 and last > 10.0 * deltas[-2]:
        raise FixedPointDivergence(f"{what} fixed-point delta grew from {deltas[-2]:.3g} to {last:.3g}")


def generalized_leapfrog(
    x0,
    q0,
    target,
    eps: float,
    n_steps: int,
    n_fixed_point: int,
    trace: Optional[list] = None,
):
    """
    Generalized leapfrog for the non-separable manifold Hamiltonian: an
    implicit momentum half step and an implicit position step, each solved
    with ``n_fixed_point`` fixed-point iterations, then an explicit momentum
    half step.

    If ``trace`` is a list, the per-iteration fixed-point deltas of each step
    are appended to it as ``(momentum_deltas, position_deltas)``.

    Raises:
        FixedPointDivergence: an iterate delta grew more than 10x or went
            non-finite
    """
    x = np.asarray(x0, dtype=float)
    q = np.asarray(q0, dtype=float)
    out = _generalized_leapfrog(x, q, target, eps, n_steps, n_fixed_point, trace)
    return out[0], out[1]


def _generalized_leapfrog(x, q, target, eps, n_steps, n_fp, trace=None, Gx=None, gx=None):
    if Gx is None:
        Gx = target.metric(x, derivatives=True)
    if gx is None:
        gx = target.grad_log_prob(x)
    h = 0.5 * eps
    for _ in range(n_steps):
        # Momentum: q_half = q - h * dH/dx(x, q_half), by fixed point.
        p = q
        p_deltas = []
        for _k in range(n_fp):
            p_new = q - h * _grad_x_htilde(gx, Gx, p)
            p_deltas.append(float(np.linalg.norm(p_new - p)))
            _check_fp(p_deltas, "momentum")
            p = p_new
        q_half = p
        # Position: x_new = x + h (G(x)^{-1} + G(x_new)^{-1}) q_half, by fixed point.
        v0 = Gx.solve(q_half)
        xt, Gt = x, Gx
        x_deltas = []
        for _k in range(n_fp):
            if xt is not x:
                Gt = target.metric(xt, derivatives=True)
            x_new = x + h * (v0 + Gt.solve(q_half))
            x_deltas.append(float(np.linalg.norm(x_new - xt)))
            _check_fp(x_deltas, "position")
            xt = x_new
        if trace is not None:
            trace.append((p_deltas, x_deltas))
        x = xt
        Gx = target.metric(x, derivatives=True)
        gx = target.grad_log_prob(x)
        q = q_half - h * _grad_x_htilde(gx, Gx, q_half)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(q))):
            raise IntegratorError("non-finite value in generalized leapfrog trajectory")
    return x, q, Gx, gx


def mhmc_kernel(x, target, cfg: HMCConfig, rng) -> Tuple[np.ndarray, bool]:
    """
    One manifold HMC transition with q ~ N(0, G(x)).

    A constant metric reduces exactly to :func:`hmc_kernel` with M = G, and
    that path is taken directly. Divergent fixed points and evaluation
    failures along the trajectory count as rejections.
    """
    x = np.asarray(x, dtype=float)
    if target.metric_is_constant:
        return hmc_kernel(x, target, target.metric(x, derivatives=False), cfg, rng)
    eps = _jittered(cfg.eps, cfg.jitter, rng)
    Gx = target.metric(x, derivatives=True)
    q = Gx.chol @ rng.standard_normal(x.size)
    lp = target.log_prob(x)
    H0 = hamiltonian_manifold(x, q, lp, Gx)
    try:
        x1, q1, G1, _ = _generalized_leapfrog(
            x, q, target, eps, cfg.n_leapfrog, cfg.n_fixed_point, Gx=Gx, gx=target.grad_log_prob(x)
        )
        lp1 = target.log_prob(x1)
        H1 = hamiltonian_manifold(x1, q1, lp1, G1)
    except (IntegratorError, ModelEvaluationError, np.linalg.LinAlgError):
        rng.random()
        return x, False
    if mh_accept(H0 - H1, rng):
        return x1, True
    return x, False


# Step-size control.


class StepSizeAdapter:
    """
    Windowed step-size controller. After every ``window`` acceptance
    outcomes the window rate is compared with ``band``; eps is multiplied
    (rate above) or divided (rate below) by 2^(1/sqrt(k)) where k counts
    the adjustments so far. Inside the band eps is left alone.
    """

    def __init__(self, eps: float, band: Tuple[float, float], window: int = 10):
        lo, hi = band
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"band must satisfy 0 < lo < hi < 1, got {band}")
        self.eps = float(eps)
        self.band = (lo, hi)
        self.window = window
        self.frozen = False
        self._buf: list = []
        self._k = 0
        self.last_rate: Optional[float] = None

    def update(self, accepted: bool) -> float:
        if self.frozen:
            return self.eps
        self._buf.append(bool(accepted))
        if len(self._buf) >= self.window:
            rate = sum(self._buf) / len(self._buf)
            self._buf.clear()
            self.last_rate = rate
            lo, hi = self.band
            if rate < lo or rate > hi:
                self._k += 1
                f = 2.0 ** (1.0 / math.sqrt(self._k))
                self.eps = self.eps * f if rate > hi else self.eps / f
        return self.eps

    def freeze(self, warn: bool = True) -> None:
        """Stop adapting; warns if the last window missed the band."""
        self.frozen = True
        self._buf.clear()
        if warn and self.last_rate is not None and not (self.band[0] <= self.last_rate <= self.band[1]):
            log.warning("step size frozen at %.4g with window acceptance %.2f outside %s",
                        self.eps, self.last_rate, self.band)

    def thaw(self, restart: bool = False) -> None:
        """Resume adapting; ``restart`` also resets the shrinking factor schedule."""
        self.frozen = False
        if restart:
            self._k = 0


def tune_epsilon(eps0: float, band: Tuple[float, float], accept_stream, window: int = 10) -> float:
    """
    Run the controller over an iterable of acceptance outcomes (or a callable
    ``eps -> bool`` paired with a length, see below) and return the final eps.

    ``accept_stream`` may be a sequence of booleans, or a tuple
    ``(step_fn, n_iter)`` where ``step_fn(eps)`` performs one kernel
    transition at step size eps and returns its acceptance flag.
    """
    ad = StepSizeAdapter(eps0, band, window)
    if isinstance(accept_stream, tuple) and callable(accept_stream[0]):
        step_fn, n_iter = accept_stream
        for _ in range(n_iter):
            ad.update(step_fn(ad.eps))
    else:
        for a in accept_stream:
            ad.update(a)
    ad.freeze()
    return ad.eps


# Kernel objects used by the samplers.


class GradientKernel:
    """Base class: ``step(x, target, rng) -> (x_next, accepted)`` at ``self.eps``."""

    name = "kernel"
    band: Tuple[float, float] = LANGEVIN_BAND

    def __init__(self, eps: float):
        self.eps = float(eps)

    def step(self, x, target, rng) -> Tuple[np.ndarray, bool]:
        raise NotImplementedError

    def _mh(self, x, target, proposal, rng):
        lp = target.log_prob(x)
        try:
            x_star, log_fwd, log_rev = proposal(x)
            lp_star = target.log_prob(x_star)
        except (ModelEvaluationError, np.linalg.LinAlgError):
            rng.random()
            return x, False
        if mh_accept(lp_star - lp + log_rev - log_fwd, rng):
            return x_star, True
        return x, False


class MALAKernel(GradientKernel):
    """Pre-conditioned MALA with a fixed proposal covariance."""

    name = "mala"

    def __init__(self, eps: float, precond_cov=None, precond: Optional[MetricBundle] = None):
        super().__init__(eps)
        if precond is None and precond_cov is not None:
            precond = MetricBundle.from_covariance(precond_cov)
        self.precond = precond

    def step(self, x, target, rng):
        bundle = self.precond if self.precond is not None else MetricBundle(np.eye(np.size(x)))
        return self._mh(x, target, lambda z: mala_propose(z, target.grad_log_prob, bundle, self.eps, rng), rng)


class SmMALAKernel(GradientKernel):
    name = "smmala"

    def step(self, x, target, rng):
        return self._mh(x, target, lambda z: smmala_propose(z, target, self.eps, rng), rng)


class SimplifiedSmMALAKernel(GradientKernel):
    name = "simplified_smmala"

    def step(self, x, target, rng):
        return self._mh(x, target, lambda z: simplified_smmala_propose(z, target, self.eps, rng), rng)


class HMCKernel(GradientKernel):
    """Classical HMC with a fixed mass matrix (identity by default)."""

    name = "hmc"
    band = HAMILTONIAN_BAND

    def __init__(self, eps: float, n_leapfrog: int = 20, mass=None, jitter: float = 0.2):
        super().__init__(eps)
        self.n_leapfrog = n_leapfrog
        self.mass = None if mass is None else _as_bundle(mass)
        self.jitter = jitter

    def step(self, x, target, rng):
        M = self.mass if self.mass is not None else MetricBundle(np.eye(np.size(x)))
        return hmc_kernel(x, target, M, HMCConfig(self.eps, self.n_leapfrog, jitter=self.jitter), rng)


class MHMCKernel(GradientKernel):
    """Manifold HMC with the generalized leapfrog integrator."""

    name = "mhmc"
    band = HAMILTONIAN_BAND

    def __init__(self, eps: float, n_leapfrog: int = 10, n_fixed_point: int = 2, jitter: float = 0.2):
        super().__init__(eps)
        self.n_leapfrog = n_leapfrog
        self.n_fixed_point = n_fixed_point
        self.jitter = jitter

    def step(self, x, target, rng):
        cfg = HMCConfig(self.eps, self.n_leapfrog, self.n_fixed_point, self.jitter)
        return mhmc_kernel(x, target, cfg, rng)


def default_step_size(kind: str, dim: int) -> float:
    """Starting step sizes scaled with dimension; adaptation refines them."""
    if kind in ("mala", "smmala", "simplified_smmala"):
        return 1.2 * dim ** (-1.0 / 6.0)
    if kind == "mhmc":
        return 1.0 * dim ** (-0.25)
    return 0.5 * dim ** (-0.25)
