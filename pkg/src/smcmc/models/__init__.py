from .gaussian import (
    DispersionError,
    GaussianModelParams,
    LinearGaussianModel,
    SensorGrid,
    build_dispersion,
)
from .ghcount import (
    GHDistribution,
    GHParams,
    PoissonObsParams,
    SkewedTPoissonModel,
    default_ghcount_model,
    gh_logpdf,
    grad_gh_logpdf,
    log_bessel_k,
    poisson_model,
    sample_gh,
    sample_gig,
    skewed_t_covariance,
)


def gaussian_model(params: GaussianModelParams, grid: SensorGrid) -> LinearGaussianModel:
    return LinearGaussianModel(params, grid)
