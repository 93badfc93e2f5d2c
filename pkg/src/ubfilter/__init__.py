"""Unbiased multilevel particle filtering for partially observed diffusions."""

from .errors import ConfigError, NumericalFailure, WeightCollapse
from .estimators import (
    RandomizationConfig,
    UnbiasedResult,
    amlpf_estimate,
    default_config,
    nested_cpf_estimate,
    nested_pf_estimate,
    unbiased_estimate,
    variance_probe,
    xi_term,
)
from .filters import ResamplePolicy, cpf2_run, cpf_run, pf_run
from .models import Dataset, TestFunction, build_model, clark_cameron_model, gbm_model, nlm_model, simulate_dataset
from .oracles import gbm_exact_filter, reference_pf

__all__ = [
    "ConfigError",
    "NumericalFailure",
    "WeightCollapse",
    "RandomizationConfig",
    "UnbiasedResult",
    "amlpf_estimate",
    "default_config",
    "nested_cpf_estimate",
    "nested_pf_estimate",
    "unbiased_estimate",
    "variance_probe",
    "xi_term",
    "ResamplePolicy",
    "cpf2_run",
    "cpf_run",
    "pf_run",
    "Dataset",
    "TestFunction",
    "build_model",
    "clark_cameron_model",
    "gbm_model",
    "nlm_model",
    "simulate_dataset",
    "gbm_exact_filter",
    "reference_pf",
]
