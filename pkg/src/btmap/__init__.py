"""Bayesian triangular transport maps for spatial fields.

The package fits a lower-triangular transport map to replicated
observations of a random field: each variable is regressed on a small
set of previously ordered variables with a Gaussian-process prior whose
scale parameters are integrated out analytically.  The fitted map gives
cheap exact sampling, density evaluation, and conditional simulation,
and extends to non-Gaussian noise through a Dirichlet-process mixture
on the regression residuals.
"""

from .ordering import Ordering, correlation_distance, maximin_order, nearest_neighbors
from .kernels import Hyper, RowPrior, row_prior, kernel_eval, sparsity_m
from .fitting import FitConfig, FittedMap, FittedRow, fit_map, fit_row, integrated_loglik
from .transform import (
    Coefficients,
    conditional_sample,
    forward,
    gp_predict,
    inverse,
    logpdf,
    sample,
)
from .dpm import DPMChain, DPMConfig, DPMHyper, dpm_gibbs, dpm_logpdf, dpm_sample
from .scenarios import TrueMap, build_true_map, make_scenario, scenario_sample, true_logpdf
from .evaluation import (
    KLReport,
    ScoreReport,
    baseline_exp_cov,
    baseline_samp_tap,
    coef_diagnostics,
    kl_estimate,
    log_score,
)
from .dataio import load_chain, load_map, save_chain, save_map
from .errors import BtmapError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "Ordering",
    "maximin_order",
    "nearest_neighbors",
    "Hyper",
    "RowPrior",
    "row_prior",
    "kernel_eval",
    "sparsity_m",
    "FitConfig",
    "FittedMap",
    "FittedRow",
    "fit_map",
    "fit_row",
    "integrated_loglik",
    "Coefficients",
    "forward",
    "inverse",
    "sample",
    "conditional_sample",
    "logpdf",
    "gp_predict",
    "DPMChain",
    "DPMConfig",
    "DPMHyper",
    "dpm_gibbs",
    "dpm_logpdf",
    "dpm_sample",
    "TrueMap",
    "build_true_map",
    "make_scenario",
    "scenario_sample",
    "true_logpdf",
    "ScoreReport",
    "KLReport",
    "log_score",
    "kl_estimate",
    "baseline_samp_tap",
    "baseline_exp_cov",
    "correlation_distance",
    "coef_diagnostics",
    "save_map",
    "load_map",
    "save_chain",
    "load_chain",
    "BtmapError",
    "DataError",
    "NumericalError",
]
