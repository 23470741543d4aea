"""Stepped wedge trials with dropout: simulation, joint models and Monte Carlo studies."""

__version__ = "0.1.0"

from .design import StudyDesign, build_standard_design
from .estimate import FitOptions, FitResult, fit
from .likelihood import QuadratureSettings, total_loglik
from .model import ModelSpec, ParameterVector, icc_from_variances
from .simulate import (LogisticDropout, NoDropout, SimConfig, TrialDataset,
                       WeibullDropout, simulate_trial)

__all__ = [
    "StudyDesign", "build_standard_design", "FitOptions", "FitResult", "fit",
    "QuadratureSettings", "total_loglik", "ModelSpec", "ParameterVector",
    "icc_from_variances", "LogisticDropout", "NoDropout", "SimConfig",
    "TrialDataset", "WeibullDropout", "simulate_trial",
]
