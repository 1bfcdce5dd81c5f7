"""
Sequential MCMC filtering.

At time n a Markov chain runs over (ancestor index a, current state x) with
invariant law proportional to g(y_n | x) f(x | bank[a]) / N, where ``bank``
holds the N retained states of time n-1. After N_b burn-in iterations the
next N current states form the new bank. Only the current-time marginal is
stored; a path is represented by its ancestor index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .diagnostics import ChainDiagnostics, chain_ess, count_unique_rows
from .hmm import CapabilityError, ConditionalTarget, StateSpaceModel
from .kernels import GradientKernel, StepSizeAdapter, mh_accept

ANCESTOR_MODES = ("uniform", "predictive", "gibbs")
JOINT_PROPOSAL = "prior-independent"  # fixed choice for the composite joint draw


@dataclass
class SmcmcConfig:
    N: int = 200
    burn_in_fraction: float = 0.1
    ancestor_mode: str = "uniform"
    block_size: int = 4
    within_block: str = "prior"  # "prior" (conditional transition) or "rw"
    rw_scale: float = 0.05
    rw_band: Tuple[float, float] = (0.2, 0.4)
    adapt: bool = True
    window: int = 10
    # restart the step-size schedule at every time step: the chain starts from
    # a prior draw, so each burn-in needs the full doubling/halving range
    restart: bool = True

    def __post_init__(self):
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.ancestor_mode not in ANCESTOR_MODES:
            raise ValueError(f"ancestor_mode must be one of {ANCESTOR_MODES}")
        if self.within_block not in ("prior", "rw"):
            raise ValueError("within_block must be 'prior' or 'rw'")

    @property
    def n_burn(self) -> int:
        return int(round(self.burn_in_fraction * self.N))

    @property
    def n_iterations(self) -> int:
        return self.n_burn + self.N


@dataclass
class SampleBank:
    """Retained states of the previous time step, with optional ancestor log-weights."""

    states: np.ndarray
    log_beta: Optional[np.ndarray] = None

    @classmethod
    def anchor(cls, model: StateSpaceModel) -> "SampleBank":
        return cls(model.initial_state()[None, :])

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def beta(self) -> np.ndarray:
        if self.log_beta is None:
            return np.full(self.N, 1.0 / self.N)
        return np.exp(self.log_beta)


@dataclass
class ChainSample:
    ancestor: int
    current: np.ndarray


class StageCounter:
    def __init__(self):
        self.accepted = 0
        self.proposed = 0

    def add(self, acc: bool) -> None:
        self.accepted += int(acc)
        self.proposed += 1

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


# Ancestor weights and moves.


def _cdf(log_w) -> np.ndarray:
    c = np.cumsum(np.exp(log_w - logsumexp(log_w)))
    c[-1] = 1.0
    return c


def _categorical(log_w, rng, cdf: Optional[np.ndarray] = None) -> int:
    c = _cdf(log_w) if cdf is None else cdf
    return int(np.searchsorted(c, rng.random(), side="right"))


def ancestor_weights_precompute(bank: SampleBank, y, model: StateSpaceModel, mode: str = "uniform") -> np.ndarray:
    """
    Normalized ancestor weights beta over the bank.

    ``uniform`` gives 1/N each; ``predictive`` gives weights proportional to
    g(y | E[x_n | x_{n-1} = bank_j]).
    """
    N = bank.N
    if mode == "uniform":
        return np.full(N, 1.0 / N)
    if mode != "predictive":
        raise ValueError(f"unknown ancestor-weight mode {mode!r}")
    means = np.stack([model.transition_mean(b) for b in bank.states])
    lw = model.log_likelihood_batch(y, means)
    if not np.any(np.isfinite(lw)):
        raise FloatingPointError("all ancestor weights are zero")
    return np.exp(lw - logsumexp(lw))


def ancestor_log_ratio(model, x, b_cur, b_star, log_beta_cur: float = 0.0, log_beta_star: float = 0.0) -> float:
    """log of f(x | b*) beta(a) / (f(x | b) beta(a*))."""
    return (model.log_transition(x, b_star) + log_beta_cur) - (model.log_transition(x, b_cur) + log_beta_star)


def ancestor_move(chain: ChainSample, bank: SampleBank, model: StateSpaceModel, rng) -> Tuple[ChainSample, bool]:
    """
    MH update of the ancestor with an index proposal a* ~ beta that ignores
    the current chain state. RNG order: proposal, then acceptance uniform.
    """
    if bank.log_beta is None:
        a_star = int(rng.integers(bank.N))
        lb_cur = lb_star = 0.0
    else:
        a_star = _categorical(bank.log_beta, rng)
        lb_cur, lb_star = bank.log_beta[chain.ancestor], bank.log_beta[a_star]
    if a_star == chain.ancestor:
        mh_accept(0.0, rng)
        return chain, True
    lr = ancestor_log_ratio(model, chain.current, bank.states[chain.ancestor], bank.states[a_star], lb_cur, lb_star)
    if mh_accept(lr, rng):
        return ChainSample(a_star, chain.current), True
    return chain, False


def perfect_ancestor_gibbs(chain: ChainSample, bank: SampleBank, model: StateSpaceModel, rng) -> ChainSample:
    """Draw the ancestor exactly from weights proportional to f(x | bank_j). Costs O(N)."""
    lw = model.log_transition_batch(chain.current, bank.states)
    if not np.any(np.isfinite(lw)):
        raise FloatingPointError("all ancestor conditional weights are zero")
    return ChainSample(_categorical(lw, rng), chain.current)


# Independent joint proposals.


def prior_independent_kernel(
    chain: ChainSample, bank: SampleBank, y, model: StateSpaceModel, rng, ll_cur: Optional[float] = None
) -> Tuple[ChainSample, bool, float]:
    """
    Propose a* uniform on the bank and x* ~ f(. | bank[a*]); accept with the
    likelihood ratio g(y | x*) / g(y | x).

    Returns:
        (chain, accepted, log-likelihood at the returned state)
    """
    if ll_cur is None:
        ll_cur = model.log_likelihood(y, chain.current)
    a_star = int(rng.integers(bank.N))
    x_star = model.sample_transition(bank.states[a_star], rng)
    ll_star = model.log_likelihood(y, x_star)
    if mh_accept(ll_star - ll_cur, rng):
        return ChainSample(a_star, x_star), True, ll_star
    return chain, False, ll_cur


def _require_optimal(model):
    for name in ("predictive_loglik_batch", "sample_optimal"):
        if not hasattr(model, name):
            raise CapabilityError(
                f"{type(model).__name__} has no closed-form optimal proposal; it needs a linear-Gaussian model"
            )


def optimal_independent_kernel(
    chain: ChainSample, bank: SampleBank, y, model, rng, log_alpha: Optional[np.ndarray] = None,
    cdf: Optional[np.ndarray] = None,
) -> Tuple[ChainSample, bool]:
    """
    Draw a* with probability proportional to p(y | bank_j) and x* from
    p(x | y, bank[a*]). The proposal is the target, so it is always accepted.
    ``cdf`` optionally caches the cumulative ancestor weights across calls.
    """
    _require_optimal(model)
    if log_alpha is None:
        log_alpha = model.predictive_loglik_batch(y, bank.states)
    a_star = _categorical(log_alpha, rng, cdf)
    return ChainSample(a_star, model.sample_optimal(y, bank.states[a_star], rng)), True


# Composite kernel pieces.


def block_prior_log_ratio(model, y, x, x_star, block) -> float:
    """Conditional-prior block proposal: only the block's likelihood factors remain."""
    return float(np.sum(model.log_likelihood_terms(y, x_star)[block] - model.log_likelihood_terms(y, x)[block]))


def block_rw_log_ratio(model, y, x, x_star, x_prev, block) -> float:
    """Symmetric random-walk block proposal: block likelihood plus the full transition."""
    return block_prior_log_ratio(model, y, x, x_star, block) + (
        model.log_transition(x_star, x_prev) - model.log_transition(x, x_prev)
    )


def random_blocks(d: int, size: int, rng):
    perm = rng.permutation(d)
    return [np.sort(perm[s : s + size]) for s in range(0, d, size)]


class CompositeState:
    """Mutable per-filter state carried between iterations (random-walk scale)."""

    def __init__(self, cfg: SmcmcConfig):
        self.rw = StepSizeAdapter(cfg.rw_scale, cfg.rw_band, cfg.window)


def composite_kernel(
    chain: ChainSample,
    bank: SampleBank,
    y,
    model: StateSpaceModel,
    cfg: SmcmcConfig,
    rng,
    state: Optional[CompositeState] = None,
    counters: Optional[dict] = None,
) -> ChainSample:
    """
    Composite MH kernel: a joint independent draw of (ancestor, x) from the
    prior, an ancestor move, then MH-within-Gibbs over a random partition of
    x into blocks of ``cfg.block_size``.
    """
    if state is None:
        state = CompositeState(cfg)
    c = counters if counters is not None else {k: StageCounter() for k in ("joint", "ancestor", "block")}
    chain, acc, _ = prior_independent_kernel(chain, bank, y, model, rng)
    c["joint"].add(acc)
    chain, acc = _ancestor_step(chain, bank, model, cfg, rng)
    c["ancestor"].add(acc)
    x = chain.current.copy()
    x_prev = bank.states[chain.ancestor]
    for blk in random_blocks(x.size, cfg.block_size, rng):
        x_star = x.copy()
        if cfg.within_block == "prior":
            x_star[blk] = model.sample_conditional_transition(x, x_prev, blk, rng)
            lr = block_prior_log_ratio(model, y, x, x_star, blk)
        else:
            x_star[blk] = x[blk] + state.rw.eps * rng.standard_normal(blk.size)
            lr = block_rw_log_ratio(model, y, x, x_star, x_prev, blk)
        acc = mh_accept(lr, rng)
        if acc:
            x = x_star
        c["block"].add(acc)
        if cfg.within_block == "rw":
            state.rw.update(acc)
    return ChainSample(chain.ancestor, x)


def _ancestor_step(chain, bank, model, cfg, rng):
    if bank.N == 1:
        return chain, True
    if cfg.ancestor_mode == "gibbs":
        return perfect_ancestor_gibbs(chain, bank, model, rng), True
    return ancestor_move(chain, bank, model, rng)


# Filter driver.


class SmcmcFilter:
    """
    Sequential MCMC filter.

    ``kernel`` is ``"prior"`` (the composite kernel with conditional-prior
    block updates), ``"optimal"`` (the exact independent kernel, linear-
    Gaussian only), or a :class:`GradientKernel`, which is then applied to x
    after each ancestor move. Gradient kernel step sizes adapt during
    burn-in only and carry over between time steps.
    """

    def __init__(self, model: StateSpaceModel, cfg: SmcmcConfig, kernel="prior"):
        self.model = model
        self.cfg = cfg
        self.kernel = kernel
        if kernel == "optimal":
            _require_optimal(model)
        elif kernel != "prior" and not isinstance(kernel, GradientKernel):
            raise ValueError(f"unsupported kernel {kernel!r}")
        self.adapter = (
            StepSizeAdapter(kernel.eps, kernel.band, cfg.window) if isinstance(kernel, GradientKernel) else None
        )
        self.composite = CompositeState(cfg)

    def initial_bank(self) -> SampleBank:
        return SampleBank.anchor(self.model)

    def _prepare_bank(self, bank: SampleBank, y) -> SampleBank:
        if self.cfg.ancestor_mode == "predictive" and bank.N > 1:
            beta = ancestor_weights_precompute(bank, y, self.model, "predictive")
            with np.errstate(divide="ignore"):
                return SampleBank(bank.states, np.log(beta))
        return SampleBank(bank.states)

    def step(self, bank: SampleBank, y, rng) -> Tuple[SampleBank, ChainDiagnostics]:
        t0 = time.perf_counter()
        cfg, model = self.cfg, self.model
        y = np.asarray(y, dtype=float)
        bank = self._prepare_bank(bank, y)
        a0 = int(rng.integers(bank.N))
        chain = ChainSample(a0, model.sample_transition(bank.states[a0], rng))
        counters = {k: StageCounter() for k in ("joint", "ancestor", "block", "kernel")}
        kept = np.empty((cfg.N, model.dim))
        anc = np.empty(cfg.N, dtype=int)
        log_alpha = model.predictive_loglik_batch(y, bank.states) if self.kernel == "optimal" else None
        alpha_cdf = _cdf(log_alpha) if log_alpha is not None else None
        grad = isinstance(self.kernel, GradientKernel)
        if grad:
            if cfg.adapt:
                self.adapter.thaw(restart=cfg.restart)
            else:
                self.adapter.freeze(warn=False)
            self.kernel.eps = self.adapter.eps
        if self.kernel == "prior" and cfg.within_block == "rw":
            if cfg.adapt:
                self.composite.rw.thaw(restart=cfg.restart)
            else:
                self.composite.rw.freeze(warn=False)
        for it in range(cfg.n_iterations):
            if it == cfg.n_burn:
                if grad:
                    self.adapter.freeze(warn=False)
                    self.kernel.eps = self.adapter.eps
                self.composite.rw.freeze(warn=False)
            if self.kernel == "optimal":
                chain, acc = optimal_independent_kernel(chain, bank, y, model, rng, log_alpha, alpha_cdf)
                counters["joint"].add(acc)
            elif self.kernel == "prior":
                chain = composite_kernel(chain, bank, y, model, cfg, rng, self.composite, counters)
            else:
                chain, acc = _ancestor_step(chain, bank, model, cfg, rng)
                counters["ancestor"].add(acc)
                target = ConditionalTarget(model, bank.states[chain.ancestor], y)
                x, acc = self.kernel.step(chain.current, target, rng)
                chain = ChainSample(chain.ancestor, x)
                counters["kernel"].add(acc)
                if it < cfg.n_burn and cfg.adapt:
                    self.kernel.eps = self.adapter.update(acc)
            if it >= cfg.n_burn:
                kept[it - cfg.n_burn] = chain.current
                anc[it - cfg.n_burn] = chain.ancestor
        block_rate = counters["block"].rate
        diag = ChainDiagnostics(
            accept_joint=counters["joint"].rate,
            accept_refine=counters["ancestor"].rate,
            accept_kernel=counters["kernel"].rate if grad else block_rate,
            ess=chain_ess(kept) if cfg.N >= 10 else None,
            unique_ancestors=count_unique_rows(kept),
            parent_indices=int(np.unique(anc).size),
            n_iterations=cfg.n_iterations,
            wall_s=time.perf_counter() - t0,
            eps=self.adapter.eps if grad else float("nan"),
            extra={"joint_proposal": JOINT_PROPOSAL} if self.kernel == "prior" else {},
        )
        if grad and self.adapter.last_rate is not None:
            diag.extra["burn_in_window_rate"] = self.adapter.last_rate
        return SampleBank(kept), diag


def smcmc_timestep(bank: SampleBank, y, model: StateSpaceModel, cfg: SmcmcConfig, rng, kernel="prior"):
    """Functional form of one :class:`SmcmcFilter` step with a fresh adapter."""
    return SmcmcFilter(model, cfg, kernel).step(bank, y, rng)
