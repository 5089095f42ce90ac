"""Hyperbolic-space combinatorial SMC for Bayesian phylogenetics."""

__version__ = "0.1.0"

from .evolution import Alignment, BranchPrior, RateMatrix  # noqa: F401
from .csmc import run_csmc  # noqa: F401
from .ncsmc import run_ncsmc  # noqa: F401
from .training import TrainConfig, TrainableParams, elbo_estimate, gradient, train  # noqa: F401
