"""Model comparison: WAIC, bridge-sampling evidence and posterior model
probabilities."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .diagnostics import DegenerateError, _atomic_write, _json_safe, effective_sample_size

__all__ = [
    "WaicResult",
    "waic",
    "BridgeResult",
    "BridgeConvergenceError",
    "SingularProposalError",
    "bridge_log_marginal",
    "MarginalizedTarget",
    "hierarchical_log_marginal",
    "ModelComparison",
    "posterior_model_probs",
    "ComparisonReport",
]


@dataclass(frozen=True)
class WaicResult:
    """WAIC on the deviance scale with its pointwise ingredients."""

    waic: float
    se: float
    lppd: float
    p_waic: float
    pointwise: np.ndarray = field(repr=False, compare=False, default=None)


def waic(loglik) -> WaicResult:
    """Widely applicable information criterion.

    Parameters
    ----------
    loglik : array_like
        Pointwise log-likelihood, ``(chain, iteration, observation)`` or
        ``(draw, observation)``. Chains are pooled.

    Returns
    -------
    WaicResult
        ``waic = -2 (lppd - p_waic)``; ``se`` is ``sqrt(n var_i(waic_i))``.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim == 3:
        ll = ll.reshape(-1, ll.shape[-1])
    if ll.ndim != 2:
        raise ValueError("loglik must be (chain, iteration, obs) or (draw, obs)")
    s, n = ll.shape
    if s < 2:
        raise DegenerateError("WAIC needs at least two posterior draws")
    if not np.all(np.isfinite(ll)):
        raise ValueError("loglik contains non-finite entries")
    lppd_i = special.logsumexp(ll, axis=0) - math.log(s)
    # shifting by one draw keeps constant columns exactly at zero variance
    p_i = np.var(ll - ll[:1], axis=0, ddof=1)
    contrib = -2.0 * (lppd_i - p_i)
    lppd = float(lppd_i.sum())
    p_waic = float(p_i.sum())
    se = math.sqrt(n * np.var(contrib, ddof=1)) if n > 1 else 0.0
    return WaicResult(-2.0 * (lppd - p_waic), se, lppd, p_waic, contrib)


class BridgeConvergenceError(RuntimeError):
    """The bridge fixed-point iteration did not converge."""

    def __init__(self, message: str, trace: Sequence[float]):
        super().__init__(message)
        self.trace = list(trace)


class SingularProposalError(np.linalg.LinAlgError):
    """The moment-matched proposal covariance is not positive definite."""


@dataclass(frozen=True)
class BridgeResult:
    log_marginal: float
    iterations: int
    rel_mcse: float
    converged: bool = True


def _as_chain_draws(samples) -> np.ndarray:
    x = np.asarray(getattr(samples, "unconstrained", samples), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError("draws must be (draw, dim) or (chain, draw, dim)")
    return x


def _evaluator(target) -> Callable[[np.ndarray], np.ndarray]:
    fn = getattr(target, "log_density", target)

    def evaluate(u):
        lp = np.asarray(fn(u), dtype=float)
        return np.where(np.isnan(lp), -np.inf, lp)

    return evaluate


def _proposal(fit: np.ndarray):
    mean = fit.mean(axis=0)
    cov = np.atleast_2d(np.cov(fit, rowvar=False))
    scale = np.trace(cov) / cov.shape[0]
    if not np.isfinite(scale) or scale <= 0:
        raise SingularProposalError("posterior draws have no spread; the proposal is degenerate")
    for jitter in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            chol = np.linalg.cholesky(cov + jitter * scale * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(chol) > 0):
            return mean, chol
    raise SingularProposalError("proposal covariance is not positive definite even with jitter")


def _mvn_logpdf(x, mean, chol):
    z = np.linalg.solve(chol, (x - mean).T).T
    d = mean.size
    return -0.5 * (z * z).sum(axis=1) - np.log(np.diag(chol)).sum() - 0.5 * d * math.log(2 * math.pi)


def bridge_log_marginal(draws, target, *, seed: int | np.random.Generator = 0,
                        tol: float = 1e-10, max_iter: int = 1000,
                        min_draws: int = 1000) -> BridgeResult:
    """Log marginal likelihood by the optimal bridge with a normal proposal.

    Parameters
    ----------
    draws : array_like or PosteriorDraws
        Posterior draws on the unconstrained scale, ``(chain, draw, dim)`` or
        ``(draw, dim)``. For :class:`~cpnlmm.sampler.PosteriorDraws` the
        stored unconstrained array is used.
    target : callable or object with ``log_density``
        Unnormalized log posterior on the same scale, Jacobians included,
        vectorized over leading axes.
    seed : int or Generator
        Source of the proposal draws.
    tol, max_iter : float, int
        Stop when the relative change of the ratio estimate drops below
        ``tol``; raise :class:`BridgeConvergenceError` after ``max_iter``.

    Notes
    -----
    Each chain is split in half. First halves fit a moment-matched Gaussian;
    second halves and an equal number of Gaussian draws enter the fixed-point
    iteration. ``rel_mcse`` is the first-order relative error of the evidence,
    with the posterior-side term inflated by the autocorrelation of the
    bridge function along the chains.
    """
    x = _as_chain_draws(draws)
    c, s, d = x.shape
    if c * s < min_draws:
        raise ValueError(f"bridge sampling needs at least {min_draws} draws, got {c * s}")
    half = s // 2
    fit = x[:, :half].reshape(-1, d)
    post = x[:, half:]
    n1 = post.shape[0] * post.shape[1]
    mean, chol = _proposal(fit)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n2 = n1
    prop = mean + rng.standard_normal((n2, d)) @ chol.T

    evaluate = _evaluator(target)
    post_flat = post.reshape(-1, d)
    l1 = evaluate(post_flat) - _mvn_logpdf(post_flat, mean, chol)
    l2 = evaluate(prop) - _mvn_logpdf(prop, mean, chol)
    if not np.all(np.isfinite(l1)):
        raise ValueError("log density is not finite at some posterior draws")
    lstar = float(np.median(l1))
    e1 = l1 - lstar
    e2 = l2 - lstar
    s1 = n1 / (n1 + n2)
    s2 = n2 / (n1 + n2)
    log_s1, log_s2 = math.log(s1), math.log(s2)

    # work with log r throughout so the iteration never overflows
    log_r = 0.0
    trace = [log_r]
    converged = False
    for iteration in range(1, max_iter + 1):
        num = special.logsumexp(e2 - np.logaddexp(log_s1 + e2, log_s2 + log_r)) - math.log(n2)
        den = special.logsumexp(-np.logaddexp(log_s1 + e1, log_s2 + log_r)) - math.log(n1)
        new = float(num - den)
        trace.append(new)
        if abs(math.expm1(new - log_r)) < tol:
            log_r = new
            converged = True
            break
        log_r = new
    if not converged:
        raise BridgeConvergenceError(
            f"bridge iteration did not converge in {max_iter} iterations", trace)

    # first-order relative error of the estimate
    f1 = np.exp(e2 - np.logaddexp(log_s1 + e2, log_s2 + log_r))
    f2 = np.exp(-np.logaddexp(log_s1 + e1, log_s2 + log_r))
    m1, m2 = f1.mean(), f2.mean()
    v1 = f1.var(ddof=1) / m1**2 if m1 > 0 else np.inf
    v2 = f2.var(ddof=1) / m2**2 if m2 > 0 else np.inf
    ess = n1
    if post.shape[1] >= 4 and np.isfinite(v2) and v2 > 0:
        try:
            ess = effective_sample_size(f2.reshape(post.shape[0], post.shape[1]))
        except DegenerateError:
            pass
    rel = math.sqrt(v1 / n2 + v2 / ess)
    return BridgeResult(log_r + lstar, iteration, rel, converged)


class MarginalizedTarget:
    """Posterior of a hierarchical model's population parameters with the
    subject random effects integrated out by importance sampling.

    Each subject gets a fixed set of ``n_importance`` draws from a defensive
    mixture: a Gaussian fitted to that subject's posterior draws of its raw
    random effects (covariance inflated by ``inflate``) and, with weight
    ``prior_weight``, the standard-normal prior. Because the draws are held
    fixed, :meth:`log_density` is a smooth deterministic function, as the
    bridge iteration requires.
    """

    def __init__(self, model, draws, n_importance: int = 64, seed: int = 0,
                 inflate: float = 2.0, prior_weight: float = 0.125, batch: int = 32):
        u = _as_chain_draws(draws).reshape(-1, model.dim)
        self.model = model
        self.dim = model.re_offset
        self.batch = batch
        n = model.n_subjects
        rng = np.random.default_rng(seed)
        z_post = u[:, model.re_offset:].reshape(-1, n, 3)
        n_prior = max(1, int(round(prior_weight * n_importance)))
        n_fit = n_importance - n_prior
        z = np.empty((n_importance, n, 3))
        log_q = np.empty((n_importance, n))
        for i in range(n):
            mean = z_post[:, i].mean(axis=0)
            cov = inflate * np.cov(z_post[:, i], rowvar=False) + 1e-6 * np.eye(3)
            chol = np.linalg.cholesky(cov)
            z[:n_fit, i] = mean + rng.standard_normal((n_fit, 3)) @ chol.T
            z[n_fit:, i] = rng.standard_normal((n_prior, 3))
            fitted = stats.multivariate_normal(mean, cov).logpdf(z[:, i])
            prior = stats.multivariate_normal(np.zeros(3), np.eye(3)).logpdf(z[:, i])
            log_q[:, i] = np.logaddexp(math.log(n_fit / n_importance) + fitted,
                                       math.log(n_prior / n_importance) + prior)
        self.z = z
        self.log_prior_z = -0.5 * (z * z).sum(axis=-1) - 1.5 * math.log(2 * math.pi)
        self.log_q = log_q
        self.phi = u[:, : model.re_offset]

    def _full(self, phi):
        u = np.zeros(phi.shape[:-1] + (self.model.dim,))
        u[..., : self.dim] = phi
        return u

    def log_density(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        lead = phi.shape[:-1]
        phi = phi.reshape(-1, self.dim)
        m = self.model
        out = np.empty(phi.shape[0])
        for start in range(0, phi.shape[0], self.batch):
            chunk = phi[start : start + self.batch]
            u0 = self._full(chunk)
            # hyperprior and Jacobian without the random-effect terms
            hyper = (m.log_prior_unconstrained(u0) + m.log_jacobian(u0)
                     + 1.5 * m.n_subjects * math.log(2 * math.pi))
            fixed, _, sd, _, _ = m._parts(u0)
            fixed = tuple(np.asarray(f)[:, None] for f in fixed)
            eta = self.z[None] * sd[:, None, None, 1:]
            ll = m._pointwise(fixed, sd[:, None, 0], eta).sum(axis=-1)
            log_w = ll + self.log_prior_z - self.log_q
            marginal = special.logsumexp(log_w, axis=1) - math.log(self.z.shape[0])
            out[start : start + self.batch] = hyper + marginal.sum(axis=-1)
        return out.reshape(lead)


def hierarchical_log_marginal(model, draws, *, seed: int = 0, n_importance: int = 64,
                              **kwargs) -> BridgeResult:
    """Log evidence of a fitted hierarchical model.

    Bridge sampling runs on the population parameters; the random effects are
    integrated out subject by subject (see :class:`MarginalizedTarget`).
    """
    x = _as_chain_draws(draws)
    target = MarginalizedTarget(model, x, n_importance=n_importance, seed=seed)
    return bridge_log_marginal(x[..., : model.re_offset], target, seed=seed, **kwargs)


@dataclass(frozen=True)
class ModelComparison:
    """Posterior model probabilities from log marginal likelihoods."""

    models: tuple[str, ...]
    log_marginals: tuple[float, ...]
    priors: tuple[float, ...]
    probabilities: tuple[float, ...]
    iterations: tuple[int | None, ...] = ()
    rel_mcse: tuple[float | None, ...] = ()

    def __getitem__(self, model: str) -> float:
        return self.probabilities[self.models.index(model)]

    def to_dict(self) -> dict:
        return asdict(self)


def posterior_model_probs(log_marginals, priors=None, models=None,
                          iterations=None, rel_mcse=None) -> ModelComparison:
    """Softmax of ``log p(y|M_k) + log p(M_k)``.

    ``log_marginals`` is a sequence, or a mapping from model name to value.
    ``priors`` defaults to uniform.
    """
    if isinstance(log_marginals, dict):
        models = list(log_marginals) if models is None else list(models)
        values = np.array([log_marginals[m] for m in models], dtype=float)
    else:
        values = np.asarray(log_marginals, dtype=float).ravel()
        models = [str(i) for i in range(values.size)] if models is None else list(models)
    k = values.size
    if k == 0:
        raise ValueError("no models to compare")
    if isinstance(priors, dict):
        missing = [m for m in models if m not in priors]
        if missing:
            raise ValueError(f"no prior probability for model(s) {', '.join(missing)}")
        priors = [priors[m] for m in models]
    prior = np.full(k, 1.0 / k) if priors is None else np.asarray(priors, dtype=float)
    if prior.shape != (k,) or np.any(prior < 0) or not math.isclose(prior.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("model priors must be non-negative and sum to 1")
    if not np.all(np.isfinite(values)):
        raise ValueError("log marginal likelihoods must be finite")
    with np.errstate(divide="ignore"):
        logits = values + np.log(prior)
    probs = special.softmax(logits)
    return ModelComparison(
        models=tuple(models),
        log_marginals=tuple(float(v) for v in values),
        priors=tuple(float(p) for p in prior),
        probabilities=tuple(float(p) for p in probs),
        iterations=tuple(iterations) if iterations is not None else (None,) * k,
        rel_mcse=tuple(rel_mcse) if rel_mcse is not None else (None,) * k,
    )


class ComparisonReport:
    """Per-model table ``model, waic, waic_se, log_marginal, pmp``."""

    columns = ("model", "waic", "waic_se", "log_marginal", "pmp")

    def __init__(self, rows: list[dict]):
        self.rows = [dict(r) for r in rows]

    @classmethod
    def build(cls, waics: dict[str, WaicResult], comparison: ModelComparison) -> "ComparisonReport":
        rows = []
        for m, lm, p in zip(comparison.models, comparison.log_marginals, comparison.probabilities):
            w = waics.get(m)
            rows.append({
                "model": m,
                "waic": w.waic if w else float("nan"),
                "waic_se": w.se if w else float("nan"),
                "log_marginal": lm,
                "pmp": p,
            })
        return cls(rows)

    def __eq__(self, other):
        if not isinstance(other, ComparisonReport):
            return NotImplemented
        return json.dumps(_json_safe(self.rows)) == json.dumps(_json_safe(other.rows))

    def reweight(self, priors=None) -> "ComparisonReport":
        """Recompute model probabilities from the stored marginals."""
        cmp_ = posterior_model_probs({r["model"]: r["log_marginal"] for r in self.rows}, priors)
        rows = [{**r, "pmp": cmp_[r["model"]]} for r in self.rows]
        return ComparisonReport(rows)

    def best(self, by: str = "waic") -> str:
        key = (lambda r: r["waic"]) if by == "waic" else (lambda r: -r["pmp"])
        return min(self.rows, key=key)["model"]

    def to_csv(self, path) -> None:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join([r["model"]] + [repr(float(r[c])) for c in self.columns[1:]]))
        _atomic_write(path, "\n".join(lines) + "\n")

    def to_json(self, path, extra: dict | None = None) -> None:
        doc = {"rows": self.rows, **(extra or {})}
        _atomic_write(path, json.dumps(_json_safe(doc), indent=2) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ComparisonReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [{"model": r["model"], **{c: float(r[c]) for c in cls.columns[1:]}}
                    for r in csv.DictReader(fh)]
        return cls(rows)

    @classmethod
    def from_json(cls, path) -> "ComparisonReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = [{k: (float("nan") if v is None else v) for k, v in r.items()} for r in doc["rows"]]
        return cls(rows)
