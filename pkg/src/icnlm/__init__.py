"""Implicit-copula neural linear model: calibrated distributional regression."""

from .copula_model import LogPosterior, ParamVector, PriorKind, PriorSpec
from .data_io import Dataset, SyntheticSpec, generate_synthetic, load_dataset, load_fit, save_fit
from .hmc import HmcSettings, PosteriorDraws
from .marginal import MarginalEstimate, fit_kde
from .model import ViSettings, diagnose, fit_model, predict_table
from .predictive import FittedModel, PredictivePosterior, posterior_at
from .vi import VariationalFit, VariationalParams

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FittedModel",
    "HmcSettings",
    "LogPosterior",
    "MarginalEstimate",
    "ParamVector",
    "PosteriorDraws",
    "PredictivePosterior",
    "PriorKind",
    "PriorSpec",
    "SyntheticSpec",
    "VariationalFit",
    "VariationalParams",
    "ViSettings",
    "diagnose",
    "fit_kde",
    "fit_model",
    "generate_synthetic",
    "load_dataset",
    "load_fit",
    "posterior_at",
    "predict_table",
    "save_fit",
]
