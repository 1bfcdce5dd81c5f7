import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from smcmc.hmm import ConditionalTarget
from smcmc.kernels import simplified_smmala_propose, smmala_propose
from smcmc.models import GaussianModelParams, LinearGaussianModel, SensorGrid, build_dispersion, gaussian_model
from smcmc.models.gaussian import DispersionError


def test_dispersion_diagonal():
    D = build_dispersion(SensorGrid.square(9), 3.0, 0.01, 20.0)
    np.testing.assert_allclose(np.diag(D.matrix), 3.01)
    assert D.jitter == 0.0


def test_dispersion_decays_with_distance():
    grid = SensorGrid(np.array([[0.0, 0.0], [1e3, 0.0]]))
    assert build_dispersion(grid, 3.0, 0.01, 20.0).matrix[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_dispersion_8x8_self_consistent():
    D = build_dispersion(SensorGrid.square(64), 3.0, 0.01, 20.0)
    assert np.allclose(D.matrix, D.matrix.T)
    L = np.linalg.cholesky(D.matrix)
    np.testing.assert_allclose(L @ L.T, D.matrix, atol=1e-10)
    assert np.max(np.abs(D.matrix @ np.linalg.inv(D.matrix) - np.eye(64))) < 1e-8


def test_dispersion_jitter_escalation():
    # Coincident sensors with a vanishing nugget give a rank-one matrix.
    grid = SensorGrid(np.zeros((5, 2)))
    D = build_dispersion(grid, 3.0, 1e-30, 20.0)
    assert D.jitter > 0
    np.testing.assert_allclose(D.chol @ D.chol.T, D.matrix, atol=1e-12)


def test_dispersion_failure_raises(monkeypatch):
    def fail(_):
        raise np.linalg.LinAlgError("not PD")

    monkeypatch.setattr(np.linalg, "cholesky", fail)
    with pytest.raises(DispersionError):
        build_dispersion(SensorGrid.square(4), 3.0, 0.01, 20.0)


def test_dispersion_rejects_nonpositive_parameters():
    with pytest.raises(ValueError):
        build_dispersion(SensorGrid.square(4), 3.0, 0.0, 20.0)


def test_grid_layout_and_csv(tmp_path):
    g = SensorGrid.square(16)
    assert g.locations.min() == 1 and g.locations.max() == 4
    with pytest.raises(ValueError):
        SensorGrid.square(10)
    p = tmp_path / "grid.csv"
    g.to_csv(p)
    assert p.read_text().splitlines()[0] == "k,sx,sy"
    np.testing.assert_array_equal(SensorGrid.from_csv(p).locations, g.locations)
    D = g.squared_distances()
    assert np.allclose(D, D.T) and np.all(np.diag(D) == 0)


def test_params_validation():
    with pytest.raises(ValueError):
        GaussianModelParams(sigma_y2=0.0)
    with pytest.raises(ValueError):
        GaussianModelParams(alpha1=0.0)


def test_scalar_metric():
    m = gaussian_model(GaussianModelParams(), SensorGrid.square(1))
    G = m.metric(np.zeros(1), np.zeros(1)).G
    assert G[0, 0] == pytest.approx(1 / 2 + 1 / 3.01, abs=1e-12)
    assert round(G[0, 0], 5) == 0.83223
    assert m.metric_is_constant
    assert not m.metric(np.zeros(1), np.zeros(1)).has_derivatives


def test_likelihood_gradient_zero_at_observation(gauss16, rng):
    x = rng.normal(size=16)
    np.testing.assert_array_equal(gauss16.grad_log_likelihood(x, x), np.zeros(16))


def test_transition_sampling_moments():
    m = LinearGaussianModel(GaussianModelParams(), SensorGrid(np.array([[0.0, 0.0], [1.0, 2.0]])))
    rng = np.random.default_rng(11)
    xp = np.array([1.0, -2.0])
    n = 100_000
    X = m.sample_transition_batch(np.tile(xp, (n, 1)), rng)
    se = np.sqrt(np.diag(m.Sigma) / n)
    assert np.all(np.abs(X.mean(0) - 0.9 * xp) < 3 * se)
    C = np.cov(X.T)
    # SE of a sample covariance entry: sqrt((S_ij^2 + S_ii S_jj) / n)
    S = m.Sigma
    se_c = np.sqrt((S**2 + np.outer(np.diag(S), np.diag(S))) / n)
    assert np.all(np.abs(C - S) < 3 * se_c)


def test_transition_logpdf_quadratic_form(gauss16, rng):
    for _ in range(5):
        x, xp = rng.normal(size=16), rng.normal(size=16)
        oracle = stats.multivariate_normal(0.9 * xp, gauss16.Sigma).logpdf(x)
        assert gauss16.log_transition(x, xp) == pytest.approx(oracle, abs=1e-10)
        lt = gauss16.log_transition_batch(x, np.stack([xp, xp]))
        assert lt == pytest.approx([oracle, oracle], abs=1e-10)


def test_likelihood_terms_sum(gauss16, rng):
    x, y = rng.normal(size=16), rng.normal(size=16)
    assert gauss16.log_likelihood_terms(y, x).sum() == pytest.approx(gauss16.log_likelihood(y, x), abs=1e-12)
    oracle = stats.norm(x, np.sqrt(2.0)).logpdf(y).sum()
    assert gauss16.log_likelihood(y, x) == pytest.approx(oracle, abs=1e-10)


def test_simplified_and_full_smmala_coincide_bitwise(gauss16):
    x, xp, y = np.full(16, 0.3), np.zeros(16), np.ones(16)
    t = ConditionalTarget(gauss16, xp, y)
    a = smmala_propose(x, t, 0.4, np.random.default_rng(5))
    b = simplified_smmala_propose(x, t, 0.4, np.random.default_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1:] == b[1:]


def test_optimal_pieces_d1():
    from conftest import scalar_gaussian

    m = scalar_gaussian(alpha=0.9, Sigma=1.3, sigma_y2=2.0)
    y, xp = np.array([0.7]), np.array([[1.5], [-0.2]])
    oracle = stats.norm(0.9 * xp[:, 0], np.sqrt(1.3 + 2.0)).logpdf(0.7)
    np.testing.assert_allclose(m.predictive_loglik_batch(y, xp), oracle, atol=1e-12)
    # p(x | y, x_prev): precision 1/1.3 + 1/2
    prec = 1 / 1.3 + 1 / 2
    assert m.optimal_mean(y, xp[0]) == pytest.approx((0.9 * 1.5 / 1.3 + 0.7 / 2) / prec)


@settings(max_examples=25, deadline=None, derandomize=True)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=6, unique=True), st.integers(0, 2**31))
def test_conditional_transition_matches_gaussian_conditioning(block, seed):
    m = LinearGaussianModel(GaussianModelParams(), SensorGrid.square(16))
    rng = np.random.default_rng(seed)
    x, xp = rng.normal(size=16), rng.normal(size=16)
    b = np.array(sorted(block))
    rest = np.setdiff1d(np.arange(16), b)
    S = m.Sigma
    mu = 0.9 * xp
    # Covariance-form conditioning as the independent oracle.
    K = S[np.ix_(b, rest)] @ np.linalg.inv(S[np.ix_(rest, rest)]) if rest.size else np.zeros((b.size, 0))
    cmean = mu[b] + K @ (x[rest] - mu[rest])
    ccov = S[np.ix_(b, b)] - K @ S[np.ix_(rest, b)]
    draws = np.stack([m.sample_conditional_transition(x, xp, b, rng) for _ in range(4000)])
    se = np.sqrt(np.diag(ccov) / 4000)
    assert np.all(np.abs(draws.mean(0) - cmean) < 4.5 * se)
    np.testing.assert_allclose(np.cov(draws.T).reshape(b.size, b.size), ccov, rtol=0.2, atol=0.02)
