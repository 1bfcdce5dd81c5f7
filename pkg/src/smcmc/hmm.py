"""
Hidden Markov model contract shared by every model and filter in the package.

A model supplies the transition density f(x_n | x_{n-1}), the observation
density g(y_n | x_n), their gradients with respect to x_n, samplers for both,
and a Riemannian metric G(x_n) used by the manifold kernels. The initial
distribution is the transition evaluated from ``model.initial_state()``.

States and observations are plain 1-D numpy arrays.
"""

from __future__ import annotations

import abc
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import linalg

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelEvaluationError(ArithmeticError):
    """A density or gradient evaluation produced NaN or an invalid point."""

    def __init__(self, message: str, term: Optional[str] = None):
        super().__init__(message)
        self.term = term


class CapabilityError(TypeError):
    """The model does not provide a structure an algorithm requires."""


class MetricBundle:
    """
    Position-dependent metric G(x) with its factorization and derivatives.

    Derivatives of G can be supplied either as a dense tensor ``dG`` of shape
    (d, d, d) with ``dG[i] = dG/dx(i)``, or, when every dG/dx(i) has a single
    non-zero entry at (i, i), as the vector ``dG_diag`` of those entries.
    A bundle with neither is treated as a constant metric.

    Args:
        G: symmetric positive-definite matrix (d, d)
        dG: optional dense derivative tensor (d, d, d)
        dG_diag: optional diagonal derivative entries (d,)
    """

    def __init__(self, G, dG=None, dG_diag=None):
        G = np.asarray(G, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(f"metric must be square, got shape {G.shape}")
        if dG is not None and dG_diag is not None:
            raise ValueError("pass at most one of dG and dG_diag")
        self.G = G
        self.dim = G.shape[0]
        try:
            self.chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise ModelEvaluationError("metric is not positive-definite", "metric") from exc
        self.log_det = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        self.dG = None if dG is None else np.asarray(dG, dtype=float)
        self.dG_diag = None if dG_diag is None else np.asarray(dG_diag, dtype=float)

    @classmethod
    def from_covariance(cls, cov) -> "MetricBundle":
        """Constant metric equal to the inverse of ``cov``."""
        cov = np.asarray(cov, dtype=float)
        return cls(np.linalg.inv(cov) if cov.ndim == 2 else np.array([[1.0 / float(cov)]]))

    @property
    def has_derivatives(self) -> bool:
        return self.dG is not None or self.dG_diag is not None

    def solve(self, v):
        """Return G^{-1} v."""
        return linalg.cho_solve((self.chol, True), v, check_finite=False)

    def sqrt_inv_apply(self, z):
        """Return L^{-T} z, which has covariance G^{-1} when z is standard normal."""
        return linalg.solve_triangular(self.chol, z, lower=True, trans="T", check_finite=False)

    def quad(self, v) -> float:
        """Return v^T G v."""
        return float(v @ self.G @ v)

    def inv_quad(self, v) -> float:
        """Return v^T G^{-1} v."""
        w = linalg.solve_triangular(self.chol, v, lower=True, check_finite=False)
        return float(w @ w)

    @cached_property
    def _chol_inv(self) -> np.ndarray:
        return linalg.solve_triangular(self.chol, np.eye(self.dim), lower=True, check_finite=False)

    @cached_property
    def inv(self) -> np.ndarray:
        Linv = self._chol_inv
        return Linv.T @ Linv

    @cached_property
    def inv_diag(self) -> np.ndarray:
        Linv = self._chol_inv
        return np.einsum("ij,ij->j", Linv, Linv)

    def derivative(self, i: int) -> np.ndarray:
        """Dense dG/dx(i); zeros for a constant metric."""
        if self.dG is not None:
            return self.dG[i]
        out = np.zeros((self.dim, self.dim))
        if self.dG_diag is not None:
            out[i, i] = self.dG_diag[i]
        return out

    def trace_terms(self) -> np.ndarray:
        """Vector of Tr{G^{-1} dG/dx(i)} over i."""
        if self.dG_diag is not None:
            return self.inv_diag * self.dG_diag
        if self.dG is not None:
            return np.einsum("ij,kji->k", self.inv, self.dG)
        return np.zeros(self.dim)

    def quad_terms(self, v) -> np.ndarray:
        """Vector of v^T (dG/dx(i)) v over i."""
        if self.dG_diag is not None:
            return self.dG_diag * v * v
        if self.dG is not None:
            return np.einsum("j,kjl,l->k", v, self.dG, v)
        return np.zeros(self.dim)

    def drift(self) -> np.ndarray:
        """Manifold Langevin drift: -sum_j [G^{-1} dG/dx(j) G^{-1}]_{ij}."""
        if self.dG_diag is not None:
            return -self.inv @ (self.dG_diag * self.inv_diag)
        if self.dG is not None:
            Gi = self.inv
            return -np.einsum("ia,jab,bj->i", Gi, self.dG, Gi)
        return np.zeros(self.dim)


class StateSpaceModel(abc.ABC):
    """
    Abstract state-space model.

    Subclasses implement the scalar density/gradient/sampler methods. The
    ``*_batch`` methods have loop-based defaults and should be overridden
    with vectorized versions where particle filters need speed.

    Density methods return -inf outside the support and must be pure:
    no hidden mutable state, all randomness through the ``rng`` argument.
    """

    dim: int
    obs_dim: int
    metric_is_constant: bool = False

    def initial_state(self) -> np.ndarray:
        """Anchor state x_0 such that mu(x_1) = f(x_1 | x_0)."""
        return np.zeros(self.dim)

    @abc.abstractmethod
    def log_transition(self, x, x_prev) -> float: ...

    @abc.abstractmethod
    def grad_log_transition(self, x, x_prev) -> np.ndarray: ...

    @abc.abstractmethod
    def log_likelihood(self, y, x) -> float: ...

    @abc.abstractmethod
    def grad_log_likelihood(self, y, x) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_transition(self, x_prev, rng: np.random.Generator) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_observation(self, x, rng: np.random.Generator) -> np.ndarray: ...

    @abc.abstractmethod
    def metric(self, x, x_prev, derivatives: bool = True) -> MetricBundle:
        """Metric at x given the ancestor; derivatives only when requested."""

    def transition_mean(self, x_prev) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no closed-form transition mean")

    def transition_covariance(self) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no closed-form transition covariance")

    def log_likelihood_terms(self, y, x) -> np.ndarray:
        """Per-sensor log-likelihood terms; their sum is ``log_likelihood``."""
        raise CapabilityError(f"{type(self).__name__} likelihood is not component-separable")

    def sample_conditional_transition(self, x, x_prev, block, rng) -> np.ndarray:
        """Draw x[block] from f(x[block] | x[rest], x_prev)."""
        raise CapabilityError(f"{type(self).__name__} has no conditional transition sampler")

    # Batched defaults. X has shape (N, d).

    def sample_transition_batch(self, X_prev, rng) -> np.ndarray:
        return np.stack([self.sample_transition(xp, rng) for xp in X_prev])

    def log_likelihood_batch(self, y, X) -> np.ndarray:
        return np.array([self.log_likelihood(y, x) for x in X])

    def log_likelihood_terms_batch(self, y, X) -> np.ndarray:
        return np.stack([self.log_likelihood_terms(y, x) for x in X])

    def log_transition_batch(self, x, X_prev) -> np.ndarray:
        """log f(x | X_prev[j]) for every row j."""
        return np.array([self.log_transition(x, xp) for xp in X_prev])


def _check_dims(model: StateSpaceModel, x, x_prev, y) -> None:
    if np.shape(x) != (model.dim,) or np.shape(x_prev) != (model.dim,):
        raise ValueError(
            f"state dimension mismatch: model d={model.dim}, "
            f"x {np.shape(x)}, x_prev {np.shape(x_prev)}"
        )
    if np.shape(y) != (model.obs_dim,):
        raise ValueError(f"observation dimension mismatch: expected {model.obs_dim}, got {np.shape(y)}")


def log_conditional_target(model: StateSpaceModel, x_n, x_prev, y_n) -> float:
    """
    Unnormalized log pi~(x_n) = log g(y_n | x_n) + log f(x_n | x_prev).

    Raises:
        ModelEvaluationError: if either term is NaN (``term`` names it)
    """
    _check_dims(model, x_n, x_prev, y_n)
    lt = model.log_transition(x_n, x_prev)
    if np.isnan(lt):
        raise ModelEvaluationError("log transition density is NaN", "log_transition")
    if lt == -np.inf:
        return -np.inf
    ll = model.log_likelihood(y_n, x_n)
    if np.isnan(ll):
        raise ModelEvaluationError("log likelihood is NaN", "log_likelihood")
    return float(ll + lt)


def grad_log_conditional_target(model: StateSpaceModel, x_n, x_prev, y_n) -> np.ndarray:
    """Gradient of :func:`log_conditional_target` with respect to x_n."""
    _check_dims(model, x_n, x_prev, y_n)
    if not np.isfinite(log_conditional_target(model, x_n, x_prev, y_n)):
        raise ModelEvaluationError("gradient requested outside the support", "support")
    g = model.grad_log_likelihood(y_n, x_n) + model.grad_log_transition(x_n, x_prev)
    if not np.all(np.isfinite(g)):
        raise ModelEvaluationError("non-finite gradient", "gradient")
    return g


class ConditionalTarget:
    """
    pi~(x) proportional to g(y | x) f(x | x_prev), the per-chain target of the
    gradient kernels, with the ancestor and observation held fixed.
    """

    def __init__(self, model: StateSpaceModel, x_prev, y):
        self.model = model
        self.x_prev = np.asarray(x_prev, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.dim = model.dim

    @property
    def metric_is_constant(self) -> bool:
        return self.model.metric_is_constant

    def log_prob(self, x) -> float:
        lt = self.model.log_transition(x, self.x_prev)
        if np.isnan(lt):
            raise ModelEvaluationError("log transition density is NaN", "log_transition")
        if lt == -np.inf:
            return -np.inf
        ll = self.model.log_likelihood(self.y, x)
        if np.isnan(ll):
            raise ModelEvaluationError("log likelihood is NaN", "log_likelihood")
        return float(lt + ll)

    def grad_log_prob(self, x) -> np.ndarray:
        return self.model.grad_log_likelihood(self.y, x) + self.model.grad_log_transition(x, self.x_prev)

    def metric(self, x, derivatives: bool = True) -> MetricBundle:
        return self.model.metric(x, self.x_prev, derivatives=derivatives)


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient with step ``h``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g
