"""Fit one or several change-point models to a dataset and score them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import ChainDiagnostics, summarize
from .hierarchy import HierarchicalModel, LongitudinalDataset, PriorConfig
from .sampler import McmcConfig, PosteriorDraws, sample
from .selection import (BridgeResult, ComparisonReport, ModelComparison, WaicResult,
                        hierarchical_log_marginal, posterior_model_probs, waic)
from .trajectories import ModelKind

__all__ = ["FitResult", "fit_model", "fit_models", "comparison_report", "derived_seed",
           "population_params"]

log = logging.getLogger(__name__)


def derived_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def population_params(model: HierarchicalModel) -> list[str]:
    return list(model.fixed_names) + list(model.variance_names)


@dataclass
class FitResult:
    """Everything computed for one model on one dataset."""

    model: ModelKind
    hierarchical: HierarchicalModel
    draws: PosteriorDraws
    summary: ChainDiagnostics
    waic: WaicResult | None = None
    evidence: BridgeResult | None = None

    @property
    def max_rhat(self) -> float:
        return self.summary.max_rhat

    def cp_estimate(self) -> tuple[float, float, float]:
        row = self.summary["beta_cp"]
        return row.median, row.lo, row.hi


def fit_model(kind, data: LongitudinalDataset, priors: PriorConfig | None = None,
              mcmc: McmcConfig | None = None, *, interval: str = "quantile",
              level: float = 0.95, evidence: bool = True, init: str = "data-informed",
              evidence_seed: int | None = None) -> FitResult:
    """Sample one model, then summarize population parameters and compute
    WAIC and (optionally) the bridge-sampling log evidence."""
    kind = ModelKind.parse(kind)
    mcmc = mcmc if mcmc is not None else McmcConfig()
    hm = HierarchicalModel(kind, data, priors)
    draws = sample(hm, mcmc, init=init)
    summary = summarize(draws, level=level, kind=interval, params=population_params(hm))
    w = waic(draws.loglik)
    bridge = None
    if evidence:
        seed = evidence_seed if evidence_seed is not None else derived_seed(mcmc.seed, 1)
        bridge = hierarchical_log_marginal(hm, draws, seed=seed)
    return FitResult(kind, hm, draws, summary, w, bridge)


def fit_models(kinds, data: LongitudinalDataset, priors: PriorConfig | None = None,
               mcmc: McmcConfig | None = None, *, model_priors=None, **kwargs):
    """Fit several models; returns the fits and the comparison report."""
    mcmc = mcmc if mcmc is not None else McmcConfig()
    fits: dict[str, FitResult] = {}
    for kind in kinds:
        kind = ModelKind.parse(kind)
        # the stream depends on the model, not on its position in ``kinds``
        cfg = replace(mcmc, seed=derived_seed(mcmc.seed, list(ModelKind).index(kind)))
        fits[kind.value] = fit_model(kind, data, priors, cfg, **kwargs)
    report = comparison_report(fits, model_priors)
    return fits, report


def comparison_report(fits: dict[str, FitResult], model_priors=None) -> ComparisonReport:
    names = list(fits)
    cmp_: ModelComparison = posterior_model_probs(
        {m: fits[m].evidence.log_marginal for m in names}, model_priors, models=names,
        iterations=[fits[m].evidence.iterations for m in names],
        rel_mcse=[fits[m].evidence.rel_mcse for m in names])
    return ComparisonReport.build({m: fits[m].waic for m in names}, cmp_)
