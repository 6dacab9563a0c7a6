"""Gaussian process regression with jointly estimated state-dependent noise."""

from .estimators import GPRegressor, HeteroscedasticGPRegressor
from .gp import (
    Dataset,
    GPModel,
    NumericalError,
    Prediction,
    fit_posterior_gp,
    fit_prior_gp,
    predict,
)
from .iterative import FitReport, HetGP, IterConfig, fit_hetgp, fit_hetgp_multi
from .kernel import KernelConfig

__all__ = [
    "Dataset",
    "FitReport",
    "GPModel",
    "GPRegressor",
    "HetGP",
    "HeteroscedasticGPRegressor",
    "IterConfig",
    "KernelConfig",
    "NumericalError",
    "Prediction",
    "fit_hetgp",
    "fit_hetgp_multi",
    "fit_posterior_gp",
    "fit_prior_gp",
    "predict",
]
