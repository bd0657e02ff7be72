"""Bayesian hierarchical change-point models for longitudinal data.

Four mean trajectories (broken stick, Bacon-Watts, bent cable and a
differential-equation model with an exponential decay phase) are fitted as
nonlinear mixed models by blockwise adaptive Metropolis, summarized with
split R-hat / ESS, and compared by WAIC and bridge-sampling posterior model
probabilities.
"""

__version__ = "0.1.0"

from .diagnostics import ChainDiagnostics, effective_sample_size, hpd_interval, split_rhat, summarize
from .fitting import FitResult, fit_model, fit_models
from .hierarchy import (HierarchicalModel, LongitudinalDataset, PriorConfig, Subject,
                        log_posterior, log_prior)
from .io import export_csv, ingest_csv
from .sampler import McmcConfig, PosteriorDraws, initialize, run_chains
from .selection import bridge_log_marginal, hierarchical_log_marginal, posterior_model_probs, waic
from .simlab import ScenarioConfig, coverage_ci, gen_dataset, run_experiment
from .trajectories import ModelKind, ThetaIndividual, mean_fn

__all__ = [
    "ChainDiagnostics", "effective_sample_size", "hpd_interval", "split_rhat", "summarize",
    "FitResult", "fit_model", "fit_models",
    "HierarchicalModel", "LongitudinalDataset", "PriorConfig", "Subject", "log_posterior",
    "log_prior",
    "export_csv", "ingest_csv",
    "McmcConfig", "PosteriorDraws", "initialize", "run_chains",
    "bridge_log_marginal", "hierarchical_log_marginal", "posterior_model_probs", "waic",
    "ScenarioConfig", "coverage_ci", "gen_dataset", "run_experiment",
    "ModelKind", "ThetaIndividual", "mean_fn",
]
