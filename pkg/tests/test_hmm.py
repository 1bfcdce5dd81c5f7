import math

import numpy as np
import pytest
from scipy import stats

from conftest import scalar_gaussian
from smcmc.hmm import (
    ConditionalTarget,
    MetricBundle,
    ModelEvaluationError,
    StateSpaceModel,
    fd_gradient,
    grad_log_conditional_target,
    log_conditional_target,
)
from smcmc.models import gh_logpdf


class HalfLineModel(StateSpaceModel):
    """Exponential increments: support x > x_prev. Used for support checks."""

    dim = obs_dim = 1

    def __init__(self, nan=False):
        self.nan = nan

    def log_transition(self, x, x_prev):
        r = x[0] - x_prev[0]
        return -r if r > 0 else -np.inf

    def grad_log_transition(self, x, x_prev):
        return np.array([-1.0])

    def log_likelihood(self, y, x):
        return float("nan") if self.nan else -0.5 * float((y[0] - x[0]) ** 2)

    def grad_log_likelihood(self, y, x):
        return np.array([y[0] - x[0]])

    def sample_transition(self, x_prev, rng):
        return x_prev + rng.exponential(size=1)

    def sample_observation(self, x, rng):
        return x + rng.standard_normal(1)

    def metric(self, x, x_prev, derivatives=True):
        return MetricBundle(np.eye(1))


def test_scalar_gaussian_target_closed_form(gauss1):
    z = np.zeros(1)
    expected = -0.5 * math.log(2 * math.pi) - 0.5 * math.log(4 * math.pi)
    assert log_conditional_target(gauss1, z, z, z) == pytest.approx(expected, abs=1e-12)


def test_scalar_gaussian_gradient(gauss1):
    z = np.zeros(1)
    g = grad_log_conditional_target(gauss1, np.ones(1), z, z)
    assert g == pytest.approx([-1.5], abs=1e-12)


def test_standard_normal_toy_gradient_at_mode():
    m = scalar_gaussian(alpha=0.0, Sigma=1.0, sigma_y2=1.0)
    z = np.zeros(1)
    assert grad_log_conditional_target(m, z, z, z) == pytest.approx([0.0])


def test_outside_support_is_minus_inf():
    m = HalfLineModel()
    assert log_conditional_target(m, np.array([-1.0]), np.zeros(1), np.zeros(1)) == -np.inf
    with pytest.raises(ModelEvaluationError) as exc:
        grad_log_conditional_target(m, np.array([-1.0]), np.zeros(1), np.zeros(1))
    assert exc.value.term == "support"


def test_nan_term_is_named():
    with pytest.raises(ModelEvaluationError) as exc:
        log_conditional_target(HalfLineModel(nan=True), np.ones(1), np.zeros(1), np.zeros(1))
    assert exc.value.term == "log_likelihood"


def test_dimension_mismatch(gauss4):
    with pytest.raises(ValueError):
        log_conditional_target(gauss4, np.zeros(3), np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError):
        log_conditional_target(gauss4, np.zeros(4), np.zeros(4), np.zeros(5))


@pytest.mark.parametrize("name", ["gauss4", "poisson4"])
def test_target_decomposes(name, request, rng):
    m = request.getfixturevalue(name)
    x, xp = rng.normal(size=4), rng.normal(size=4)
    y = m.sample_observation(x, rng)
    assert log_conditional_target(m, x, xp, y) == m.log_likelihood(y, x) + m.log_transition(x, xp)


def test_poisson_target_matches_component_oracles(poisson4, rng):
    m = poisson4
    x, xp = rng.normal(size=4), rng.normal(size=4)
    y = np.array([0.0, 2.0, 1.0, 5.0])
    rate = m.obs.m1 * np.exp(m.obs.m2 * x)
    oracle = gh_logpdf(x, m.gh.alpha * xp, m.gh) + stats.poisson.logpmf(y, rate).sum()
    assert log_conditional_target(m, x, xp, y) == pytest.approx(oracle, rel=1e-12, abs=1e-10)


@pytest.mark.parametrize("name", ["gauss4", "poisson4"])
def test_gradient_matches_finite_differences(name, request):
    m = request.getfixturevalue(name)
    rng = np.random.default_rng(7)
    for _ in range(100):
        x, xp = rng.normal(scale=1.5, size=4), rng.normal(scale=1.5, size=4)
        y = m.sample_observation(x, rng)
        g = grad_log_conditional_target(m, x, xp, y)
        fd = fd_gradient(lambda z: log_conditional_target(m, z, xp, y), x, 1e-5)
        assert np.all(np.abs(g - fd) <= 1e-5 * np.abs(g) + 1e-7), (g, fd)


def test_conditional_target_object(gauss4, rng):
    x, xp = rng.normal(size=4), rng.normal(size=4)
    y = rng.normal(size=4)
    t = ConditionalTarget(gauss4, xp, y)
    assert t.log_prob(x) == log_conditional_target(gauss4, x, xp, y)
    np.testing.assert_allclose(t.grad_log_prob(x), grad_log_conditional_target(gauss4, x, xp, y))
    assert t.metric_is_constant


def test_scalar_samplers_moment_and_chi_square(gauss1, poisson4):
    rng = np.random.default_rng(3)
    xp = np.array([0.5])
    draws = np.array([gauss1.sample_transition(xp, rng)[0] for _ in range(20000)])
    draws = np.concatenate([draws, gauss1.sample_transition_batch(np.full((80000, 1), 0.5), rng)[:, 0]])
    assert stats.kstest(draws, stats.norm(0.45, 1.0).cdf).pvalue > 1e-3
    obs = np.array([gauss1.sample_observation(np.array([0.3]), rng)[0] for _ in range(20000)])
    assert stats.kstest(obs, stats.norm(0.3, math.sqrt(2.0)).cdf).pvalue > 1e-3

    # Poisson sensor counts at a fixed state: chi-square against the pmf.
    x = np.array([0.0, 1.5, -1.0, 3.0])
    Y = np.stack([poisson4.sample_observation(x, rng) for _ in range(25000)])
    for k in range(4):
        lam = math.exp(x[k] / 3.0)
        counts = np.bincount(Y[:, k].astype(int), minlength=30)[:6]
        probs = stats.poisson.pmf(np.arange(6), lam)
        tail = Y.shape[0] - counts.sum()
        obs_c = np.append(counts, tail)
        exp_c = np.append(probs, 1 - probs.sum()) * Y.shape[0]
        keep = exp_c > 5
        obs_c = np.append(obs_c[keep], obs_c[~keep].sum())
        exp_c = np.append(exp_c[keep], exp_c[~keep].sum())
        if exp_c[-1] == 0:
            obs_c, exp_c = obs_c[:-1], exp_c[:-1]
        assert stats.chisquare(obs_c, exp_c).pvalue > 1e-3
