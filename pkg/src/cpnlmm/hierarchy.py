"""Hierarchical non-linear mixed model: data, priors, parameter transforms and
the joint log-posterior.

Subject ``i`` has parameters ``theta_k,i = beta_k + eta_k,i`` for the
intercept, the post change-point slope (decay rate for DEM) and the change
point; the pre change-point slope ``beta1`` and the transition width are shared.
Random effects are stored raw (``z = eta / omega``) on the unconstrained scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import special

from .trajectories import ModelKind, ThetaIndividual, mean_fn

__all__ = [
    "Subject",
    "LongitudinalDataset",
    "DatasetError",
    "Normal",
    "Uniform",
    "HalfCauchy",
    "PriorConfig",
    "FixedEffects",
    "VarianceComponents",
    "ParamState",
    "HierarchicalModel",
    "individual_params",
    "log_likelihood_subject",
    "log_prior",
    "log_posterior",
    "per_observation_loglik",
]

LOG_2PI = math.log(2.0 * math.pi)
RANDOM_EFFECTS = ("eta0", "eta2", "eta_cp")


class DatasetError(ValueError):
    """Raised for malformed longitudinal data."""


@dataclass(frozen=True)
class Subject:
    id: str
    times: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        outcomes = np.asarray(self.outcomes, dtype=float)
        if times.ndim != 1 or times.shape != outcomes.shape:
            raise DatasetError(f"subject {self.id!r}: times and outcomes differ in length")
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(outcomes)):
            raise DatasetError(f"subject {self.id!r}: non-finite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", outcomes)

    @property
    def n_obs(self) -> int:
        return self.times.size


class LongitudinalDataset:
    """Immutable collection of subjects with padded array views.

    The padded arrays have shape ``(n_subjects, max_obs)``; ``mask`` marks the
    real observations.
    """

    def __init__(self, subjects: Sequence[Subject]):
        subjects = tuple(subjects)
        if not subjects:
            raise DatasetError("dataset has no subjects")
        if max(s.n_obs for s in subjects) < 2:
            raise DatasetError("dataset needs a subject with at least 2 observations")
        if any(s.n_obs == 0 for s in subjects):
            raise DatasetError("every subject needs at least one observation")
        self.subjects = subjects
        width = max(s.n_obs for s in subjects)
        n = len(subjects)
        self.times = np.zeros((n, width))
        self.outcomes = np.zeros((n, width))
        self.mask = np.zeros((n, width), dtype=bool)
        for i, s in enumerate(subjects):
            self.times[i, : s.n_obs] = s.times
            self.outcomes[i, : s.n_obs] = s.outcomes
            self.mask[i, : s.n_obs] = True
        # padding repeats the last real time so the mean functions stay finite
        for i, s in enumerate(subjects):
            self.times[i, s.n_obs :] = s.times[-1]
        self.balanced = bool(self.mask.all())
        for arr in (self.times, self.outcomes, self.mask):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, ids, times, outcomes) -> "LongitudinalDataset":
        """Build from long-format parallel arrays, grouping by id in order of
        first appearance and sorting by time within subject."""
        ids = [str(i) for i in ids]
        times = np.asarray(times, dtype=float)
        outcomes = np.asarray(outcomes, dtype=float)
        groups: dict[str, list[int]] = {}
        for row, key in enumerate(ids):
            groups.setdefault(key, []).append(row)
        subjects = []
        for key, rows in groups.items():
            rows = np.asarray(rows)
            order = np.argsort(times[rows], kind="stable")
            subjects.append(Subject(key, times[rows][order], outcomes[rows][order]))
        return cls(subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def time_range(self) -> tuple[float, float]:
        t = self.times[self.mask]
        return float(t.min()), float(t.max())

    def shift_time(self, offset: float) -> "LongitudinalDataset":
        return LongitudinalDataset(
            [Subject(s.id, s.times - offset, s.outcomes) for s in self.subjects]
        )

    def long_format(self) -> tuple[list[str], np.ndarray, np.ndarray]:
        ids = [s.id for s in self.subjects for _ in range(s.n_obs)]
        return ids, self.times[self.mask].copy(), self.outcomes[self.mask].copy()

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return len(self.subjects) == len(other.subjects) and all(
            a.id == b.id
            and np.array_equal(a.times, b.times)
            and np.array_equal(a.outcomes, b.outcomes)
            for a, b in zip(self.subjects, other.subjects)
        )

    def __repr__(self):
        return f"LongitudinalDataset(n_subjects={self.n_subjects}, n_obs={self.n_obs})"


# -- priors -----------------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * LOG_2PI

    def sample(self, rng):
        return rng.normal(self.mean, self.sd)


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"uniform prior needs lo < hi, got ({self.lo}, {self.hi})")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > self.lo) & (x < self.hi)
        return np.where(inside, -math.log(self.width), -np.inf)

    def sample(self, rng):
        return rng.uniform(self.lo, self.hi)

    # scaled logit transform
    def to_unconstrained(self, x):
        p = (np.asarray(x, dtype=float) - self.lo) / self.width
        return special.logit(p)

    def from_unconstrained(self, u):
        return self.lo + self.width * special.expit(u)

    def log_jacobian(self, u):
        u = np.asarray(u, dtype=float)
        return math.log(self.width) + special.log_expit(u) + special.log_expit(-u)


@dataclass(frozen=True)
class HalfCauchy:
    loc: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("half-Cauchy scale must be positive")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.loc) / self.scale
        out = math.log(2.0 / (math.pi * self.scale)) - np.log1p(z * z)
        return np.where(x >= self.loc, out, -np.inf)

    def sample(self, rng):
        return self.loc + self.scale * abs(rng.standard_cauchy())


@dataclass(frozen=True)
class PriorConfig:
    """Prior families for one model fit.

    Defaults reproduce the simulation-study table: ``N(10, sd 10)`` intercept,
    ``N(0, sd 10)`` slope/rate, ``U(0, 20)`` change point, ``U(0, 5)``
    transition, half-Cauchy scale 10 on the residual SD and 1 on each random
    effect SD. ``beta1`` is fixed at ``beta1_value`` unless ``free_beta1``.
    """

    beta0: Normal = Normal(10.0, 10.0)
    beta2: Normal = Normal(0.0, 10.0)
    beta_cp: Uniform = Uniform(0.0, 20.0)
    theta_t: Uniform = Uniform(0.0, 5.0)
    sigma_eps: HalfCauchy = HalfCauchy(0.0, 10.0)
    omega0: HalfCauchy = HalfCauchy(0.0, 1.0)
    omega2: HalfCauchy = HalfCauchy(0.0, 1.0)
    omega_cp: HalfCauchy = HalfCauchy(0.0, 1.0)
    free_beta1: bool = False
    beta1: Normal = Normal(0.0, 10.0)
    beta1_value: float = 0.0

    @classmethod
    def table_b1(cls) -> "PriorConfig":
        return cls()

    @classmethod
    def vague(cls, **kwargs) -> "PriorConfig":
        """Normal priors with precision 0.001 on the fixed effects."""
        sd = math.sqrt(1000.0)
        return cls(beta0=Normal(0.0, sd), beta2=Normal(0.0, sd), beta1=Normal(0.0, sd), **kwargs)

    @classmethod
    def from_data(cls, data: LongitudinalDataset, **kwargs) -> "PriorConfig":
        """Data-driven uniform bounds for real-data fits."""
        lo, hi = data.time_range()
        span = hi - lo
        if span <= 0:
            raise DatasetError("all observation times are identical")
        return cls(beta_cp=Uniform(lo, hi), theta_t=Uniform(0.0, span / 4.0), **kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in ("beta0", "beta2", "beta1", "beta_cp", "theta_t",
                     "sigma_eps", "omega0", "omega2", "omega_cp"):
            prior = getattr(self, name)
            out[name] = {"family": type(prior).__name__.lower(), **prior.__dict__}
        out["free_beta1"] = self.free_beta1
        out["beta1_value"] = self.beta1_value
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "PriorConfig":
        families = {"normal": Normal, "uniform": Uniform, "halfcauchy": HalfCauchy}
        kwargs = {}
        for key, value in doc.items():
            if isinstance(value, dict):
                params = dict(value)
                family = families[params.pop("family").lower().replace("-", "").replace("_", "")]
                kwargs[key] = family(**params)
            else:
                kwargs[key] = value
        return cls(**kwargs)


# -- parameter containers ---------------------------------------------------


@dataclass(frozen=True)
class FixedEffects:
    beta0: float
    beta1: float
    beta2: float
    beta_cp: float
    theta_t: float = 0.0


@dataclass(frozen=True)
class VarianceComponents:
    sigma_eps: float
    omega0: float
    omega2: float
    omega_cp: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_eps, self.omega0, self.omega2, self.omega_cp])


@dataclass(frozen=True)
class ParamState:
    """One point of the posterior on the constrained scale.

    ``random_effects`` has shape ``(n_subjects, 3)`` with columns
    ``(eta0, eta2, eta_cp)``.
    """

    fixed: FixedEffects
    variances: VarianceComponents
    random_effects: np.ndarray = field(repr=False)

    def __post_init__(self):
        re = np.asarray(self.random_effects, dtype=float)
        if re.ndim != 2 or re.shape[1] != 3:
            raise ValueError("random_effects must have shape (n_subjects, 3)")
        object.__setattr__(self, "random_effects", re)

    def with_random_effects(self, re) -> "ParamState":
        return replace(self, random_effects=np.asarray(re, dtype=float))


def individual_params(fixed: FixedEffects, re_i) -> ThetaIndividual:
    """Compose subject parameters from fixed effects and a random-effect
    triple ``(eta0, eta2, eta_cp)``; arrays of triples broadcast."""
    re_i = np.asarray(re_i, dtype=float)
    return ThetaIndividual(
        theta0=fixed.beta0 + re_i[..., 0],
        theta1=fixed.beta1,
        theta2=fixed.beta2 + re_i[..., 1],
        theta_cp=fixed.beta_cp + re_i[..., 2],
        theta_t=fixed.theta_t,
    )


def _normal_logpdf(y, mu, sigma):
    # far-off proposals overflow to -inf, which the samplers simply reject
    with np.errstate(over="ignore"):
        r = (y - mu) / sigma
        return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * r * r


def log_likelihood_subject(model, subject: Subject, th: ThetaIndividual, sigma_eps: float) -> float:
    """Gaussian log-likelihood of one subject's observations."""
    mu = mean_fn(model, subject.times, th)
    return float(np.sum(_normal_logpdf(subject.outcomes, mu, sigma_eps)))


# -- the model --------------------------------------------------------------


class HierarchicalModel:
    """Joint density of one change-point model on one dataset.

    The unconstrained vector is laid out as
    ``[beta0, (beta1), beta2, logit beta_cp, (logit theta_t), log sigma_eps,
    log omega0, log omega2, log omega_cp, z_1, ..., z_n]`` where each ``z_i`` is
    the raw random-effect triple of subject ``i``. All density methods accept
    batches of shape ``(..., dim)``.
    """

    def __init__(self, model, data: LongitudinalDataset, priors: PriorConfig | None = None):
        self.kind = ModelKind.parse(model)
        self.data = data
        self.priors = priors if priors is not None else PriorConfig()
        fixed_names = ["beta0"]
        if self.priors.free_beta1:
            fixed_names.append("beta1")
        fixed_names += ["beta2", "beta_cp"]
        if self.kind.has_transition:
            fixed_names.append("theta_t")
        self.fixed_names = fixed_names
        self.variance_names = ["sigma_eps", "omega0", "omega2", "omega_cp"]
        n_fixed = len(fixed_names)
        self.fixed_slice = slice(0, n_fixed)
        self.variance_slice = slice(n_fixed, n_fixed + 4)
        self.re_offset = n_fixed + 4
        self.n_subjects = data.n_subjects
        self.dim = self.re_offset + 3 * self.n_subjects
        self.re_index = self.re_offset + np.arange(3 * self.n_subjects).reshape(self.n_subjects, 3)
        self._idx = {name: i for i, name in enumerate(fixed_names)}
        for j, name in enumerate(self.variance_names):
            self._idx[name] = n_fixed + j

    # names ------------------------------------------------------------------

    @property
    def param_names(self) -> list[str]:
        """Constrained parameter names, in the order used by draws arrays."""
        names = list(self.fixed_names) + list(self.variance_names)
        for sid in self.data.ids:
            names += [f"{k}[{sid}]" for k in RANDOM_EFFECTS]
        return names

    @property
    def unconstrained_names(self) -> list[str]:
        names = []
        for name in self.fixed_names:
            names.append(f"logit_{name}" if name in ("beta_cp", "theta_t") else name)
        names += [f"log_{name}" for name in self.variance_names]
        for sid in self.data.ids:
            names += [f"z0[{sid}]", f"z2[{sid}]", f"z_cp[{sid}]"]
        return names

    def index(self, name: str) -> int:
        return self._idx[name]

    # transforms -------------------------------------------------------------

    def _fixed(self, u):
        p = self.priors
        beta0 = u[..., self._idx["beta0"]]
        beta1 = u[..., self._idx["beta1"]] if p.free_beta1 else np.full(beta0.shape, p.beta1_value)
        beta2 = u[..., self._idx["beta2"]]
        beta_cp = p.beta_cp.from_unconstrained(u[..., self._idx["beta_cp"]])
        if self.kind.has_transition:
            theta_t = p.theta_t.from_unconstrained(u[..., self._idx["theta_t"]])
        else:
            theta_t = np.zeros(beta0.shape)
        return beta0, beta1, beta2, beta_cp, theta_t

    def _parts(self, u):
        u = np.asarray(u, dtype=float)
        fixed = self._fixed(u)
        log_sd = u[..., self.variance_slice]
        sd = np.exp(log_sd)
        z = u[..., self.re_offset :].reshape(u.shape[:-1] + (self.n_subjects, 3))
        eta = z * sd[..., None, 1:]
        return fixed, log_sd, sd, z, eta

    def constrain(self, u) -> np.ndarray:
        """Map unconstrained vectors to constrained draws in ``param_names`` order."""
        fixed, _, sd, _, eta = self._parts(u)
        beta0, beta1, beta2, beta_cp, theta_t = fixed
        cols = [beta0]
        if self.priors.free_beta1:
            cols.append(beta1)
        cols += [beta2, beta_cp]
        if self.kind.has_transition:
            cols.append(theta_t)
        head = np.stack(cols, axis=-1)
        eta_flat = eta.reshape(eta.shape[:-2] + (3 * self.n_subjects,))
        return np.concatenate([head, sd, eta_flat], axis=-1)

    def to_state(self, u) -> ParamState:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected a single vector of length {self.dim}")
        (beta0, beta1, beta2, beta_cp, theta_t), _, sd, _, eta = self._parts(u)
        return ParamState(
            FixedEffects(float(beta0), float(beta1), float(beta2), float(beta_cp), float(theta_t)),
            VarianceComponents(*map(float, sd)),
            eta,
        )

    def from_state(self, state: ParamState) -> np.ndarray:
        p = self.priors
        f = state.fixed
        u = np.empty(self.dim)
        u[self._idx["beta0"]] = f.beta0
        if p.free_beta1:
            u[self._idx["beta1"]] = f.beta1
        u[self._idx["beta2"]] = f.beta2
        u[self._idx["beta_cp"]] = p.beta_cp.to_unconstrained(f.beta_cp)
        if self.kind.has_transition:
            u[self._idx["theta_t"]] = p.theta_t.to_unconstrained(f.theta_t)
        sd = state.variances.as_array()
        u[self.variance_slice] = np.log(sd)
        re = state.random_effects
        if re.shape != (self.n_subjects, 3):
            raise ValueError("random effects do not match the dataset")
        u[self.re_offset :] = (re / sd[1:]).ravel()
        return u

    def log_jacobian(self, u):
        """Log-determinant of d(constrained)/d(unconstrained), including the
        raw-to-scaled random-effect map."""
        u = np.asarray(u, dtype=float)
        p = self.priors
        out = p.beta_cp.log_jacobian(u[..., self._idx["beta_cp"]])
        if self.kind.has_transition:
            out = out + p.theta_t.log_jacobian(u[..., self._idx["theta_t"]])
        log_sd = u[..., self.variance_slice]
        return out + log_sd.sum(axis=-1) + self.n_subjects * log_sd[..., 1:].sum(axis=-1)

    # densities --------------------------------------------------------------

    def theta(self, fixed, eta) -> ThetaIndividual:
        """Subject parameters with shape ``(..., n_subjects, 1)``, ready to
        broadcast against the padded time grid."""
        beta0, beta1, beta2, beta_cp, theta_t = (np.asarray(x)[..., None, None] for x in fixed)
        return ThetaIndividual(
            theta0=beta0 + eta[..., 0:1],
            theta1=beta1,
            theta2=beta2 + eta[..., 1:2],
            theta_cp=beta_cp + eta[..., 2:3],
            theta_t=theta_t,
        )

    def _pointwise(self, fixed, sigma, eta):
        th = self.theta(fixed, eta)
        mu = mean_fn(self.kind, self.data.times, th)
        sigma = np.asarray(sigma)[..., None, None]
        ll = _normal_logpdf(self.data.outcomes, mu, sigma)
        if not self.data.balanced:
            ll = np.where(self.data.mask, ll, 0.0)
        return ll

    def subject_loglik(self, u) -> np.ndarray:
        """Per-subject log-likelihood, shape ``(..., n_subjects)``."""
        fixed, _, sd, _, eta = self._parts(u)
        return self._pointwise(fixed, sd[..., 0], eta).sum(axis=-1)

    def pointwise_loglik(self, u) -> np.ndarray:
        """Per-observation log-likelihood, shape ``(..., n_obs)`` in long-format order."""
        fixed, _, sd, _, eta = self._parts(u)
        ll = self._pointwise(fixed, sd[..., 0], eta)
        if self.data.balanced:
            return ll.reshape(ll.shape[:-2] + (-1,))
        return ll[..., self.data.mask]

    def log_prior_unconstrained(self, u) -> np.ndarray:
        """Prior log-density of the constrained point represented by ``u``
        (random effects as ``N(0, omega)`` on eta, no Jacobian)."""
        fixed, log_sd, sd, z, _ = self._parts(u)
        beta0, beta1, beta2, beta_cp, theta_t = fixed
        p = self.priors
        out = p.beta0.logpdf(beta0) + p.beta2.logpdf(beta2) + p.beta_cp.logpdf(beta_cp)
        if p.free_beta1:
            out = out + p.beta1.logpdf(beta1)
        if self.kind.has_transition:
            out = out + p.theta_t.logpdf(theta_t)
        out = out + p.sigma_eps.logpdf(sd[..., 0]) + p.omega0.logpdf(sd[..., 1])
        out = out + p.omega2.logpdf(sd[..., 2]) + p.omega_cp.logpdf(sd[..., 3])
        # N(eta; 0, omega) with eta = omega * z
        return out + (
            -0.5 * (z * z).sum(axis=(-2, -1))
            - self.n_subjects * log_sd[..., 1:].sum(axis=-1)
            - 1.5 * self.n_subjects * LOG_2PI
        )

    def log_density(self, u) -> np.ndarray:
        """Log-posterior (unnormalised) on the unconstrained scale."""
        u = np.asarray(u, dtype=float)
        ll = self.subject_loglik(u).sum(axis=-1)
        return ll + self.log_prior_unconstrained(u) + self.log_jacobian(u)

    def subject_terms(self, u) -> np.ndarray:
        """Terms of the log-density that depend on subject ``i``'s raw random
        effects: its log-likelihood plus ``log N(z_i; 0, I)``."""
        _, _, _, z, _ = self._parts(u)
        return self.subject_loglik(u) - 0.5 * (z * z).sum(axis=-1)

    # initial points ---------------------------------------------------------

    def initial_state(self, policy: str, rng: np.random.Generator) -> ParamState:
        """Starting state; ``policy`` is ``"data-informed"`` or ``"prior-draw"``."""
        p = self.priors
        data = self.data
        n = data.n_subjects
        if policy == "prior-draw":
            sd = np.array([min(p.sigma_eps.sample(rng), 10 * p.sigma_eps.scale),
                           min(p.omega0.sample(rng), 10 * p.omega0.scale),
                           min(p.omega2.sample(rng), 10 * p.omega2.scale),
                           min(p.omega_cp.sample(rng), 10 * p.omega_cp.scale)])
            sd = np.maximum(sd, 1e-3)
            fixed = FixedEffects(
                beta0=p.beta0.sample(rng),
                beta1=p.beta1.sample(rng) if p.free_beta1 else p.beta1_value,
                beta2=p.beta2.sample(rng),
                beta_cp=p.beta_cp.sample(rng),
                theta_t=p.theta_t.sample(rng) if self.kind.has_transition else 0.0,
            )
            return ParamState(fixed, VarianceComponents(*sd), np.zeros((n, 3)))
        if policy != "data-informed":
            raise ValueError(f"unknown initialisation policy {policy!r}")
        first = data.outcomes[:, 0]
        beta0 = float(first.mean())
        t = data.times[data.mask]
        y = data.outcomes[data.mask]
        cp = float(np.median(t))
        lo, hi = p.beta_cp.lo, p.beta_cp.hi
        cp = float(np.clip(cp, lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo)))
        late = t > cp
        if late.sum() >= 2 and np.ptp(t[late]) > 0:
            slope = float(np.polyfit(t[late], y[late], 1)[0])
        else:
            slope = 0.0
        if self.kind is ModelKind.DEM:
            level = max(abs(beta0), 1e-3)
            beta2 = float(np.clip(-slope / level, 0.01, 2.0))
        else:
            beta2 = slope
        sigma = float(np.std(y - beta0)) / 2.0 or 1.0
        omega0 = float(np.std(first)) / 2.0 or 1.0
        omega2 = 0.5 * max(abs(beta2), 0.1)
        omega_cp = max((hi - lo) / 10.0, 0.1)
        theta_t = 0.0
        if self.kind.has_transition:
            theta_t = p.theta_t.lo + 0.5 * p.theta_t.width
        fixed = FixedEffects(beta0, p.beta1_value, beta2, cp, theta_t)
        sd = VarianceComponents(max(sigma, 1e-2), max(omega0, 1e-2), omega2, omega_cp)
        return ParamState(fixed, sd, np.zeros((n, 3)))


# -- functional surface over ParamState -------------------------------------


def log_prior(state: ParamState, priors: PriorConfig, model=ModelKind.DEM) -> float:
    """Prior log-density of a constrained state; ``-inf`` outside support."""
    kind = ModelKind.parse(model)
    f = state.fixed
    v = state.variances
    out = float(priors.beta0.logpdf(f.beta0) + priors.beta2.logpdf(f.beta2))
    out += float(priors.beta_cp.logpdf(f.beta_cp))
    if priors.free_beta1:
        out += float(priors.beta1.logpdf(f.beta1))
    if kind.has_transition:
        out += float(priors.theta_t.logpdf(f.theta_t))
    out += float(priors.sigma_eps.logpdf(v.sigma_eps) + priors.omega0.logpdf(v.omega0))
    out += float(priors.omega2.logpdf(v.omega2) + priors.omega_cp.logpdf(v.omega_cp))
    if not np.isfinite(out):
        return -math.inf
    if min(v.omega0, v.omega2, v.omega_cp, v.sigma_eps) <= 0:
        return -math.inf
    omegas = np.array([v.omega0, v.omega2, v.omega_cp])
    out += float(np.sum(_normal_logpdf(state.random_effects, 0.0, omegas)))
    return out


def _in_support(state: ParamState, priors: PriorConfig, kind: ModelKind) -> bool:
    f = state.fixed
    if not priors.beta_cp.lo < f.beta_cp < priors.beta_cp.hi:
        return False
    if kind.has_transition and not priors.theta_t.lo < f.theta_t < priors.theta_t.hi:
        return False
    return bool(np.all(state.variances.as_array() > 0))


def log_posterior(model, data: LongitudinalDataset, state: ParamState, priors: PriorConfig) -> float:
    """Log-likelihood + log-prior + log-Jacobian of the sampling transform."""
    hm = HierarchicalModel(model, data, priors)
    if not _in_support(state, priors, hm.kind):
        return -math.inf
    return float(hm.log_density(hm.from_state(state)))


def per_observation_loglik(model, data: LongitudinalDataset, state: ParamState,
                           priors: PriorConfig | None = None) -> np.ndarray:
    """Matrix ``(n_subjects, max_obs)`` of observation log-densities; padded
    cells hold NaN."""
    hm = HierarchicalModel(model, data, priors)
    f = state.fixed
    fixed = (f.beta0, f.beta1, f.beta2, f.beta_cp, f.theta_t)
    ll = hm._pointwise(fixed, state.variances.sigma_eps, state.random_effects)
    return np.where(data.mask, ll, np.nan)
