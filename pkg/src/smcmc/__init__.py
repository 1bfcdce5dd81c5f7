"""Sequential MCMC filtering with gradient-based kernels."""

__version__ = "0.1.0"
