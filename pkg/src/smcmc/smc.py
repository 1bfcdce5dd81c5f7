"""Particle filters: SIR, block SIR and resample-move."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .hmm import ConditionalTarget, StateSpaceModel
from .kernels import StepSizeAdapter

RESAMPLING_SCHEME = "systematic"


class WeightCollapse(FloatingPointError):
    """Every importance weight is zero."""


@dataclass
class ParticleSet:
    """
    Current-time particles with normalized log-weights.

    ``ess`` is the weight ESS before any resampling at this step and
    ``parents`` the index of each particle's parent in the previous set.
    """

    states: np.ndarray
    log_weights: np.ndarray
    ess: float = float("nan")
    resampled: bool = False
    parents: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @classmethod
    def from_anchor(cls, x0, N: int) -> "ParticleSet":
        if N < 2:
            raise ValueError("need at least two particles")
        X = np.tile(np.asarray(x0, dtype=float), (N, 1))
        return cls(X, np.full(N, -np.log(N)), float(N))

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    def variance(self) -> np.ndarray:
        m = self.mean()
        return self.weights @ (self.states - m) ** 2


def normalize_log_weights(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if np.any(np.isnan(logw)):
        raise ValueError("NaN log-weight")
    if not np.any(np.isfinite(logw)):
        raise WeightCollapse("all importance weights are zero")
    return logw - logsumexp(logw)


def weight_ess(log_weights) -> float:
    """1 / sum(W^2) for the normalized weights."""
    lw = normalize_log_weights(log_weights)
    return float(np.exp(-logsumexp(2.0 * lw)))


def systematic_indices(weights, rng) -> np.ndarray:
    """Systematic resampling indices from one uniform draw."""
    w = np.asarray(weights, dtype=float)
    N = w.size
    u = (rng.random() + np.arange(N)) / N
    c = np.cumsum(w)
    c[-1] = 1.0
    return np.minimum(np.searchsorted(c, u, side="right"), N - 1)


def systematic_resample(ps: ParticleSet, rng) -> ParticleSet:
    idx = systematic_indices(ps.weights, rng)
    N = ps.N
    return ParticleSet(ps.states[idx], np.full(N, -np.log(N)), ps.ess, True, idx)


def sir_step(
    ps: ParticleSet,
    y,
    model: StateSpaceModel,
    rng,
    threshold: float = 0.5,
    force_resample: bool = False,
    proposal=None,
) -> ParticleSet:
    """
    One SIR step. ``threshold`` is the resampling trigger as a fraction of N.

    With the default prior proposal the incremental log-weight is exactly
    log g(y | x). A custom ``proposal`` must provide
    ``sample(X_prev, y, rng)`` and ``logpdf(X, X_prev, y)``; weights then
    include log f - log q.
    """
    Xp = ps.states
    if proposal is None:
        X = model.sample_transition_batch(Xp, rng)
        inc = model.log_likelihood_batch(y, X)
    else:
        X = proposal.sample(Xp, y, rng)
        log_f = np.array([model.log_transition(x, xp) for x, xp in zip(X, Xp)])
        inc = model.log_likelihood_batch(y, X) + log_f - proposal.logpdf(X, Xp, y)
    inc = np.where(np.isnan(inc), -np.inf, inc)
    lw = normalize_log_weights(ps.log_weights + inc)
    ess = weight_ess(lw)
    out = ParticleSet(X, lw, ess, False, np.arange(ps.N))
    out.info["increment"] = inc
    if force_resample or ess < threshold * ps.N:
        r = systematic_resample(out, rng)
        r.info = out.info
        return r
    return out


def block_partition(d: int, B: int):
    """Contiguous index blocks of size B; the last one is smaller if B does not divide d."""
    if B < 1:
        raise ValueError("block size must be positive")
    return [np.arange(s, min(s + B, d)) for s in range(0, d, B)]


def block_sir_step(ps: ParticleSet, y, model: StateSpaceModel, block_size: int, rng) -> ParticleSet:
    """
    Block SIR: propagate with the prior, weight each block with its own
    likelihood factors and resample each block independently. Always
    resamples; output weights are uniform.
    """
    N, d = ps.states.shape
    X = model.sample_transition_batch(ps.states, rng)
    terms = model.log_likelihood_terms_batch(y, X)  # CapabilityError if not separable
    terms = np.where(np.isnan(terms), -np.inf, terms)
    full = normalize_log_weights(ps.log_weights + terms.sum(axis=1))
    out = np.empty_like(X)
    ess_blocks, uniq = [], []
    for blk in block_partition(d, block_size):
        lw = normalize_log_weights(ps.log_weights + terms[:, blk].sum(axis=1))
        ess_blocks.append(weight_ess(lw))
        idx = systematic_indices(np.exp(lw), rng)
        uniq.append(np.unique(idx).size)
        out[:, blk] = X[idx][:, blk]
    res = ParticleSet(out, np.full(N, -np.log(N)), weight_ess(full), True, None)
    res.info.update(block_ess=np.array(ess_blocks), block_unique=np.array(uniq))
    return res


@dataclass
class ResampleMoveStats:
    accepted: int = 0
    proposed: int = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def resample_move_step(
    ps: ParticleSet,
    y,
    model: StateSpaceModel,
    kernel,
    K: int,
    rng,
    adapter: Optional[StepSizeAdapter] = None,
    pilot: int = 0,
) -> ParticleSet:
    """
    SIR with forced resampling followed by K kernel moves on each particle's
    current state, targeting g(y | x) f(x | parent).

    If ``adapter`` and ``pilot`` are given, the kernel step size is first
    tuned on ``pilot`` throw-away moves of a copy of particle 0; it is then
    held fixed for all retained moves, so every move leaves its target
    invariant.
    """
    prev = ps.states
    r = sir_step(ps, y, model, rng, force_resample=True)
    stats = ResampleMoveStats()
    if K > 0:
        if adapter is not None and pilot > 0:
            adapter.thaw(restart=True)
            t0 = ConditionalTarget(model, prev[r.parents[0]], y)
            xp = r.states[0].copy()
            for _ in range(pilot):
                kernel.eps = adapter.eps
                xp, acc = kernel.step(xp, t0, rng)
                adapter.update(acc)
            adapter.freeze(warn=False)
            kernel.eps = adapter.eps
        X = r.states.copy()
        for j in range(r.N):
            target = ConditionalTarget(model, prev[r.parents[j]], y)
            for _ in range(K):
                X[j], acc = kernel.step(X[j], target, rng)
                stats.accepted += int(acc)
                stats.proposed += 1
        r = ParticleSet(X, r.log_weights, r.ess, True, r.parents, r.info)
    r.info["move_accept"] = stats.rate
    return r
