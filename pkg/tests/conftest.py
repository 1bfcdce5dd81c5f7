import numpy as np
import pytest

from smcmc.models import (
    GaussianModelParams,
    GHParams,
    LinearGaussianModel,
    PoissonObsParams,
    SensorGrid,
    build_dispersion,
    default_ghcount_model,
)


def scalar_gaussian(alpha=0.9, Sigma=1.0, sigma_y2=2.0):
    """d=1 linear-Gaussian model with an explicit transition variance."""
    return LinearGaussianModel(GaussianModelParams(alpha=alpha, sigma_y2=sigma_y2), SensorGrid.square(1), [[Sigma]])


@pytest.fixture
def gauss1():
    return scalar_gaussian()


@pytest.fixture
def gauss4():
    return LinearGaussianModel(GaussianModelParams(), SensorGrid.square(4))


@pytest.fixture
def gauss16():
    return LinearGaussianModel(GaussianModelParams(), SensorGrid.square(16))


@pytest.fixture
def poisson4():
    return default_ghcount_model(SensorGrid.square(4))


@pytest.fixture
def rng():
    return np.random.default_rng(20150)
