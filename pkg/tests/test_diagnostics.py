import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smcmc.diagnostics import (
    LOG_FLOOR,
    ChainDiagnostics,
    autocorrelation,
    chain_ess,
    count_unique_rows,
    ess_summary,
    initial_monotone_sum,
    is_degenerate,
    log_relative_mse,
    mse_per_sensor,
    posterior_summary,
)


def ar1(n, phi, seed, d=1):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, d))
    x = np.empty((n, d))
    x[0] = e[0] / math.sqrt(1 - phi * phi)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_iid_chain_ess_near_n():
    vals = [chain_ess(np.random.default_rng(s).standard_normal(1000)) for s in range(20)]
    assert 850 < np.mean(vals) <= 1000
    assert max(vals) <= 1000


def test_ar1_ess():
    # integrated autocorrelation time of AR(1) is (1 + phi) / (1 - phi) = 3 at phi = 0.5
    x = ar1(100_000, 0.5, 1)
    assert chain_ess(x[:, 0]) == pytest.approx(100_000 / 3, rel=0.1)


def test_lag_window_extension_matches_full_computation():
    x = ar1(4000, 0.97, 2)[:, 0]
    rho = autocorrelation(x, 2000)
    s, m = initial_monotone_sum(rho)
    assert m > 32  # needs more than the initial 64-lag window
    assert chain_ess(x) == pytest.approx(min(4000 / (2 * s - 1), 4000))


def test_ess_affine_invariant():
    x = ar1(2000, 0.7, 3)[:, 0]
    assert chain_ess(3.5 * x - 7.0) == pytest.approx(chain_ess(x), rel=1e-10)


def test_ess_columns_independent():
    x = np.column_stack([ar1(3000, 0.2, 4)[:, 0], ar1(3000, 0.9, 5)[:, 0]])
    e = chain_ess(x)
    assert e[0] == pytest.approx(chain_ess(x[:, 0]))
    assert e[1] == pytest.approx(chain_ess(x[:, 1]))
    assert e[0] > e[1]


def test_constant_chain_is_degenerate(caplog):
    x = np.column_stack([np.ones(50), np.random.default_rng(0).standard_normal(50)])
    with caplog.at_level(logging.WARNING):
        e = chain_ess(x)
    assert e[0] == 0.0 and e[1] > 0
    assert "degenerate" in caplog.text
    np.testing.assert_array_equal(is_degenerate(x), [True, False])


def test_short_chain_rejected():
    with pytest.raises(ValueError):
        chain_ess(np.arange(5.0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=40))
def test_monotone_sum_properties(tail):
    rho = np.array([1.0] + tail)
    s, m = initial_monotone_sum(rho)
    pairs = rho[: 2 * (rho.size // 2) : 2] + rho[1 : 2 * (rho.size // 2) : 2]
    # all retained pairs positive, the first dropped one is not
    assert np.all(pairs[:m] > 0)
    if m < pairs.size:
        assert not pairs[m] > 0
    # clipping can only reduce the raw positive sum
    assert s <= pairs[:m].sum() + 1e-12
    assert s >= 0


def test_ess_summary_and_diag_stats():
    assert ess_summary([1.0, 2.0, 6.0]) == (1.0, 2.0, 3.0, 6.0)
    assert all(math.isnan(v) for v in ChainDiagnostics().ess_stats())
    assert ChainDiagnostics(ess=np.array([4.0, 2.0])).ess_stats() == (2.0, 3.0, 3.0, 4.0)


def test_posterior_summary():
    m, v = posterior_summary([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_array_equal(m, [2.0, 4.0])
    np.testing.assert_array_equal(v, [2.0, 8.0])
    m, v = posterior_summary([[1.0, 2.0]])
    np.testing.assert_array_equal(v, 0.0)
    with pytest.raises(ValueError):
        posterior_summary(np.empty((0, 2)))


def test_log_relative_mse_forms():
    m = np.zeros((2, 2))
    v = np.ones((2, 2))
    assert log_relative_mse(m, m, v) == 0.0
    assert log_relative_mse(m, m, v, form="deviation") == LOG_FLOOR
    est = np.ones((2, 2))
    assert log_relative_mse(est, m, v) == pytest.approx(math.log(2.0))
    assert log_relative_mse(est, m, 4 * v, form="deviation") == pytest.approx(math.log(0.25))
    assert log_relative_mse(1e-6 * est, m, v, form="deviation") == LOG_FLOOR


def test_log_relative_mse_errors():
    m = np.zeros((2, 2))
    with pytest.raises(ValueError):
        log_relative_mse(m, None, None)
    with pytest.raises(ValueError):
        log_relative_mse(np.zeros(3), m, m + 1)
    with pytest.raises(ValueError):
        log_relative_mse(m, m, m + 1, form="ratio")


def test_mse_per_sensor():
    assert mse_per_sensor([[1.0, 2.0]], [[0.0, 0.0]]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        mse_per_sensor([1.0], [1.0, 2.0])


def test_count_unique_rows():
    X = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 2.0]])
    assert count_unique_rows(X) == 2
