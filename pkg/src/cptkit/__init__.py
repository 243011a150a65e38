"""Conditional permutation and conditional randomization tests."""

from cptkit.errors import CptError, DataError, DomainError, PreconditionError
from cptkit.model import (
    DiscreteTabularModel,
    GaussianLinearModel,
    KernelGaussianModel,
    conditional_mean,
    log_density,
    sample,
)
from cptkit.sampler import (
    ChainConfig,
    crt_draws,
    exact_cpt_sampler,
    exchangeable_draws,
    pairwise_step,
    run_chain,
    swap_log_odds,
)
from cptkit.inference import (
    Dataset,
    Statistic,
    TestResult,
    abs_corr,
    categorical_max_corr,
    p_value,
    residual_corr,
    run_cpt_test,
    run_crt_test,
)

__version__ = "0.1.0"

__all__ = [
    "ChainConfig",
    "CptError",
    "DataError",
    "Dataset",
    "DiscreteTabularModel",
    "DomainError",
    "GaussianLinearModel",
    "KernelGaussianModel",
    "PreconditionError",
    "Statistic",
    "TestResult",
    "abs_corr",
    "categorical_max_corr",
    "conditional_mean",
    "crt_draws",
    "exact_cpt_sampler",
    "exchangeable_draws",
    "log_density",
    "p_value",
    "pairwise_step",
    "residual_corr",
    "run_chain",
    "run_cpt_test",
    "run_crt_test",
    "sample",
    "swap_log_odds",
]
