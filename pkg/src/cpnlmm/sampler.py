"""Blockwise adaptive random-walk Metropolis over an unconstrained vector.

All chains advance together as one ``(n_chains, dim)`` array so the density is
evaluated once per block per iteration for every chain, but each chain owns
its random stream, its adaptation state and its acceptance decisions, so the
chains are statistically independent.

During warmup each block adapts a proposal covariance (running empirical
covariance of the block's coordinates) and a Robbins-Monro log step size
targeting ``target_accept``. Everything is frozen when warmup ends.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .trajectories import ModelKind
from .hierarchy import HalfCauchy, HierarchicalModel, LongitudinalDataset, Normal, ParamState, PriorConfig, Uniform

__all__ = [
    "McmcConfig",
    "PosteriorDraws",
    "DensityTarget",
    "InitializationError",
    "DivergenceError",
    "RandomWalkBlock",
    "GroupedRandomWalkBlock",
    "ShiftScaleBlock",
    "TransitionShiftBlock",
    "sample",
    "initialize",
    "run_chains",
    "hierarchical_blocks",
]


class InitializationError(RuntimeError):
    """No starting point with a finite log-posterior was found."""


class DivergenceError(RuntimeError):
    """The log-posterior of the current state became non-finite."""


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 4
    n_iters: int = 5000
    n_warmup: int = 2500
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.234
    # iterations with the initial isotropic proposal before covariance adaptation
    adapt_start: int = 50
    # covariance refresh period during warmup
    adapt_every: int = 10
    adapt_decay: float = 0.6
    init_scale: float = 0.1
    log_scale_bounds: tuple[float, float] = (-12.0, 4.0)
    init_jitter: float = 0.2
    max_init_attempts: int = 100

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2 for split R-hat")
        if not 0 <= self.n_warmup < self.n_iters:
            raise ValueError("need 0 <= n_warmup < n_iters")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")

    @classmethod
    def desk(cls, **kwargs) -> "McmcConfig":
        kwargs.setdefault("n_iters", 1500)
        kwargs.setdefault("n_warmup", 750)
        return cls(**kwargs)

    @classmethod
    def paper(cls, **kwargs) -> "McmcConfig":
        kwargs.setdefault("n_iters", 5000)
        kwargs.setdefault("n_warmup", 2500)
        return cls(**kwargs)

    @property
    def n_draws(self) -> int:
        return len(range(self.n_warmup, self.n_iters, self.thin))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "McmcConfig":
        doc = dict(doc)
        if "log_scale_bounds" in doc:
            doc["log_scale_bounds"] = tuple(doc["log_scale_bounds"])
        return cls(**doc)


@dataclass
class PosteriorDraws:
    """Post-warmup output of :func:`sample`.

    ``draws`` is ``(chain, iteration, parameter)`` on the constrained scale,
    ``unconstrained`` the matching sampler coordinates, ``loglik`` the
    per-observation log-likelihood ``(chain, iteration, observation)``.
    """

    names: list[str]
    draws: np.ndarray
    unconstrained: np.ndarray | None = None
    logpost: np.ndarray | None = None
    loglik: np.ndarray | None = None
    acceptance: dict[str, np.ndarray] = field(default_factory=dict)
    divergences: np.ndarray | None = None
    adaptation: dict[str, dict] = field(default_factory=dict)
    warmup_adaptation: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ValueError("draws must be (chain, iteration, parameter) matching names")
        c, s = self.draws.shape[:2]
        for arr in (self.unconstrained, self.logpost, self.loglik):
            if arr is not None and arr.shape[:2] != (c, s):
                raise ValueError("inconsistent chain/iteration dimensions")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iters(self) -> int:
        return self.draws.shape[1]

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def to_csv(self, directory) -> list[Path]:
        """Write one CSV per chain; values use ``repr`` so they round-trip."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for c in range(self.n_chains):
            path = directory / f"chain_{c}.csv"
            tmp = path.with_suffix(".csv.tmp")
            with open(tmp, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(self.names)
                for row in self.draws[c]:
                    writer.writerow([repr(float(x)) for x in row])
            os.replace(tmp, path)
            paths.append(path)
        return paths

    @classmethod
    def from_csv(cls, directory) -> "PosteriorDraws":
        directory = Path(directory)
        paths = sorted(directory.glob("chain_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
        if not paths:
            raise FileNotFoundError(f"no chain_*.csv files in {directory}")
        chains = []
        names = None
        for path in paths:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                if names is None:
                    names = header
                elif header != names:
                    raise ValueError(f"{path}: header differs from other chains")
                chains.append(np.array([[float(x) for x in row] for row in reader]))
        lengths = {c.shape[0] for c in chains}
        if len(lengths) != 1:
            raise ValueError(f"{directory}: chains have different lengths")
        return cls(names=list(names), draws=np.stack(chains))


# -- targets ----------------------------------------------------------------


class DensityTarget:
    """Generic target defined by a batched log-density over ``(C, dim)``."""

    def __init__(self, log_density: Callable[[np.ndarray], np.ndarray], dim: int,
                 init: Callable[[np.random.Generator], np.ndarray] | None = None,
                 names: Sequence[str] | None = None,
                 constrain: Callable[[np.ndarray], np.ndarray] | None = None,
                 pointwise_loglik: Callable[[np.ndarray], np.ndarray] | None = None):
        self._log_density = log_density
        self.dim = dim
        self._init = init
        self.param_names = list(names) if names is not None else [f"x{i}" for i in range(dim)]
        self._constrain = constrain
        self._pointwise = pointwise_loglik

    def log_density(self, u):
        return np.asarray(self._log_density(u), dtype=float)

    def constrain(self, u):
        return u if self._constrain is None else self._constrain(u)

    def initial_point(self, policy, rng):
        if self._init is None:
            return rng.normal(size=self.dim)
        return np.asarray(self._init(rng), dtype=float)

    @property
    def has_pointwise(self) -> bool:
        return self._pointwise is not None

    def pointwise_loglik(self, u):
        return self._pointwise(u)


# -- blocks -----------------------------------------------------------------


def _normals(rngs, shape):
    return np.stack([rng.standard_normal(shape) for rng in rngs])


def _uniform_logs(rngs, shape=()):
    return np.log(np.stack([rng.random(shape) for rng in rngs]))


class _Adaptive:
    """Running covariance and Robbins-Monro step for a stack of sub-blocks.

    Arrays carry a leading ``(C, G)`` shape: chains by independent groups.
    """

    def __init__(self, n_chains: int, n_groups: int, k: int, cfg: McmcConfig,
                 learn_cov: bool = True):
        self.cfg = cfg
        self.k = k
        self.learn_cov = learn_cov
        self.log_scale = np.full((n_chains, n_groups), math.log(cfg.init_scale))
        self.count = 0
        self.mean = np.zeros((n_chains, n_groups, k))
        self.m2 = np.zeros((n_chains, n_groups, k, k))
        self.chol = np.broadcast_to(np.eye(k), (n_chains, n_groups, k, k)).copy()
        self.adapting = True
        self.installed = False
        self.accepted = np.zeros((n_chains, n_groups))
        self.proposed = 0
        # covariance windows restart so the initial transient is forgotten
        w = cfg.n_warmup
        self.resets = {w // 8, w // 4, w // 2} - {0}

    def proposal(self, rngs, n_groups):
        eps = _normals(rngs, (n_groups, self.k))
        step = np.einsum("cgij,cgj->cgi", self.chol, eps)
        return np.exp(self.log_scale)[..., None] * step

    def record(self, it: int, alpha, accepted, x):
        self.accepted += accepted
        self.proposed += 1
        if not self.adapting:
            return
        cfg = self.cfg
        gamma = (it + 1.0) ** (-cfg.adapt_decay)
        self.log_scale = np.clip(self.log_scale + gamma * (alpha - cfg.target_accept),
                                 *cfg.log_scale_bounds)
        if not self.learn_cov:
            return
        if it in self.resets:
            self.count = 0
            self.mean[:] = 0.0
            self.m2[:] = 0.0
        # Welford update of the block covariance
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta[..., :, None] * (x - self.mean)[..., None, :]
        if (it >= cfg.adapt_start and it % cfg.adapt_every == 0
                and self.count > max(2 * self.k, cfg.adapt_every)):
            cov = self.m2 / (self.count - 1)
            cov = cov * (2.38**2 / self.k)
            jitter = 1e-8 * (np.trace(cov, axis1=-2, axis2=-1)[..., None, None] / self.k + 1e-8)
            cov = cov + jitter * np.eye(self.k)
            try:
                self.chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                diag = np.sqrt(np.clip(np.diagonal(cov, axis1=-2, axis2=-1), 1e-16, None))
                self.chol = diag[..., None] * np.eye(self.k)
            if not self.installed:
                # the learned covariance carries its own scale; the step
                # multiplier restarts at one instead of keeping the value
                # tuned for the isotropic start
                self.installed = True
                self.log_scale[:] = 0.0

    def freeze(self):
        self.adapting = False
        self.accepted[:] = 0
        self.proposed = 0

    def rates(self):
        if self.proposed == 0:
            return np.full(self.accepted.shape[0], np.nan)
        return (self.accepted / self.proposed).mean(axis=1)

    def snapshot(self) -> dict:
        return {"log_scale": self.log_scale.copy(), "chol": self.chol.copy()}


class RandomWalkBlock:
    """Joint Gaussian random-walk update of the coordinates in ``index``.

    With ``coupled`` indices the block also learns, during warmup, the
    regression of those coordinates on its own and moves them along: a step
    ``d`` on the block is accompanied by ``B d`` on the coupled coordinates.
    The joint step is still a symmetric translation, so the acceptance ratio
    is the plain density ratio.
    """

    def __init__(self, name: str, index, n_chains: int, cfg: McmcConfig, coupled=None):
        self.name = name
        self.index = np.asarray(index, dtype=int)
        self.adapt = _Adaptive(n_chains, 1, self.index.size, cfg)
        self.coupled = None if coupled is None else np.asarray(coupled, dtype=int)
        if self.coupled is not None:
            k, m = self.index.size, self.coupled.size
            self.gain = np.zeros((n_chains, m, k))
            self._n = 0
            self._mx = np.zeros((n_chains, k))
            self._my = np.zeros((n_chains, m))
            self._sxx = np.zeros((n_chains, k, k))
            self._syx = np.zeros((n_chains, m, k))

    def _learn(self, it, u):
        cfg = self.adapt.cfg
        if it in self.adapt.resets:
            self._n = 0
            for arr in (self._mx, self._my, self._sxx, self._syx):
                arr[:] = 0.0
        x = u[:, self.index]
        y = u[:, self.coupled]
        self._n += 1
        dx = x - self._mx
        dy = y - self._my
        self._mx += dx / self._n
        self._my += dy / self._n
        self._sxx += dx[:, :, None] * (x - self._mx)[:, None, :]
        self._syx += dy[:, :, None] * (x - self._mx)[:, None, :]
        k = self.index.size
        if it >= cfg.adapt_start and it % cfg.adapt_every == 0 and self._n > max(4 * k, 20):
            sxx = self._sxx + 1e-9 * np.eye(k) * (np.trace(self._sxx, axis1=1, axis2=2)[:, None, None] / k + 1e-12)
            self.gain = np.linalg.solve(sxx, np.swapaxes(self._syx, 1, 2)).swapaxes(1, 2)

    def step(self, target, u, logp, rngs, it):
        step = self.adapt.proposal(rngs, 1)[:, 0]
        prop = u.copy()
        prop[:, self.index] += step
        if self.coupled is not None:
            prop[:, self.coupled] += np.einsum("cmk,ck->cm", self.gain, step)
        lp = target.log_density(prop)
        diverged = np.isnan(lp)
        log_alpha = np.where(diverged, -np.inf, lp - logp)
        accept = _uniform_logs(rngs) < log_alpha
        u = np.where(accept[:, None], prop, u)
        logp = np.where(accept, lp, logp)
        alpha = np.exp(np.minimum(log_alpha, 0.0))
        if self.coupled is not None and self.adapt.adapting:
            self._learn(it, u)
        self.adapt.record(it, alpha[:, None], accept[:, None], u[:, self.index][:, None, :])
        return u, logp, diverged


class GroupedRandomWalkBlock:
    """Independent random-walk updates of conditionally independent groups.

    ``index`` has shape ``(G, k)``. ``terms(u)`` must return ``(C, G)`` values
    such that changing only group ``g`` changes the log-density by exactly the
    change in column ``g``.
    """

    def __init__(self, name: str, index, terms: Callable[[np.ndarray], np.ndarray],
                 n_chains: int, cfg: McmcConfig):
        self.name = name
        self.index = np.asarray(index, dtype=int)
        self.terms = terms
        g, k = self.index.shape
        self.adapt = _Adaptive(n_chains, g, k, cfg)

    def step(self, target, u, logp, rngs, it):
        g = self.index.shape[0]
        step = self.adapt.proposal(rngs, g)
        prop = u.copy()
        prop[:, self.index] += step
        cur = self.terms(u)
        new = self.terms(prop)
        diverged_cells = np.isnan(new)
        log_alpha = np.where(diverged_cells, -np.inf, new - cur)
        accept = _uniform_logs(rngs, (g,)) < log_alpha
        mask = np.zeros(u.shape, dtype=bool)
        mask[:, self.index] = np.repeat(accept[:, :, None], self.index.shape[1], axis=2)
        u = np.where(mask, prop, u)
        logp = logp + np.where(accept, new - cur, 0.0).sum(axis=1)
        alpha = np.exp(np.minimum(log_alpha, 0.0))
        self.adapt.record(it, alpha, accept, u[:, self.index])
        return u, logp, diverged_cells.any(axis=1)


def _std_normal_logsum(z):
    return -0.5 * np.sum(z * z, axis=-1)


class ShiftScaleBlock:
    """Likelihood-free moves along directions that leave every subject's
    parameters unchanged.

    For each random-effect group ``k``: a shift move ``beta_k += d,
    z_k -= d / omega_k`` and a scale move ``omega_k *= e, z_k /= e``. Both keep
    ``beta_k + omega_k z_k`` fixed, so only prior and Jacobian terms enter the
    acceptance ratio.
    """

    def __init__(self, name: str, groups: list[dict], n_chains: int, cfg: McmcConfig):
        self.name = name
        self.groups = groups
        self.adapt = _Adaptive(n_chains, 2 * len(groups), 1, cfg, learn_cov=False)

    def step(self, target, u, logp, rngs, it):
        n_c = u.shape[0]
        eps = self.adapt.proposal(rngs, 2 * len(self.groups))[..., 0]
        logu = _uniform_logs(rngs, (2 * len(self.groups),))
        u = u.copy()
        alphas = np.zeros((n_c, 2 * len(self.groups)))
        accepts = np.zeros((n_c, 2 * len(self.groups)), dtype=bool)
        for j, grp in enumerate(self.groups):
            loc, log_sd, zcols, prior, sd_prior = (
                grp["loc"], grp["log_sd"], grp["z"], grp["prior"], grp["sd_prior"])
            omega = np.exp(u[:, log_sd])
            z = u[:, zcols]
            # shift
            d = eps[:, 2 * j]
            z_new = z - (d / omega)[:, None]
            dz = _std_normal_logsum(z_new) - _std_normal_logsum(z)
            if isinstance(prior, Uniform):
                beta = prior.from_unconstrained(u[:, loc])
                beta_new = beta + d
                inside = (beta_new > prior.lo) & (beta_new < prior.hi)
                v_new = prior.to_unconstrained(np.where(inside, beta_new, beta))
                log_alpha = np.where(inside, dz, -np.inf)
                delta = dz + prior.log_jacobian(v_new) - prior.log_jacobian(u[:, loc])
                loc_new = v_new
            else:
                loc_new = u[:, loc] + d
                log_alpha = dz + prior.logpdf(loc_new) - prior.logpdf(u[:, loc])
                delta = log_alpha
            acc = logu[:, 2 * j] < log_alpha
            u[:, loc] = np.where(acc, loc_new, u[:, loc])
            u[:, zcols] = np.where(acc[:, None], z_new, z)
            logp = logp + np.where(acc, delta, 0.0)
            alphas[:, 2 * j] = np.exp(np.minimum(log_alpha, 0.0))
            accepts[:, 2 * j] = acc
            # scale
            e = eps[:, 2 * j + 1]
            z = u[:, zcols]
            z_new = z * np.exp(-e)[:, None]
            ls = u[:, log_sd]
            delta = (sd_prior.logpdf(np.exp(ls + e)) - sd_prior.logpdf(np.exp(ls)) + e
                     + _std_normal_logsum(z_new) - _std_normal_logsum(z))
            log_alpha = delta - len(zcols) * e
            acc = logu[:, 2 * j + 1] < log_alpha
            u[:, log_sd] = np.where(acc, ls + e, ls)
            u[:, zcols] = np.where(acc[:, None], z_new, z)
            logp = logp + np.where(acc, delta, 0.0)
            alphas[:, 2 * j + 1] = np.exp(np.minimum(log_alpha, 0.0))
            accepts[:, 2 * j + 1] = acc
        self.adapt.record(it, alphas, accepts, None)
        return u, logp, np.zeros(n_c, dtype=bool)


# -- hierarchical wiring ----------------------------------------------------


class TransitionShiftBlock:
    """Move the transition width and the change point together.

    ``theta_t -> theta_t + d`` is paired with ``beta_cp -> beta_cp - coef * d``
    (on the constrained scale), which for the DEM trajectory keeps the middle
    of the decay ramp in place. Without this the width is pinned by the
    subject change points and a plain random walk barely moves it. The map is
    an involution in the step sign, so the acceptance ratio only needs the
    Jacobian of the change-point coordinate.
    """

    def __init__(self, name: str, width_index: int, width_prior, cp_index: int, cp_prior,
                 coef: float, n_chains: int, cfg: McmcConfig):
        self.name = name
        self.width_index = width_index
        self.width_prior = width_prior
        self.cp_index = cp_index
        self.cp_prior = cp_prior
        self.coef = coef
        self.adapt = _Adaptive(n_chains, 1, 1, cfg, learn_cov=False)

    def step(self, target, u, logp, rngs, it):
        # proposals start at the scale of the prior support
        step = self.adapt.proposal(rngs, 1)[:, 0, 0]
        a = u[:, self.width_index]
        b = u[:, self.cp_index]
        width = self.width_prior.from_unconstrained(a)
        width_new = self.width_prior.from_unconstrained(a + step)
        cp_new = self.cp_prior.from_unconstrained(b) - self.coef * (width_new - width)
        inside = (cp_new > self.cp_prior.lo) & (cp_new < self.cp_prior.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            b_new = np.where(inside, self.cp_prior.to_unconstrained(np.where(inside, cp_new, b)), b)
        prop = u.copy()
        prop[:, self.width_index] = a + step
        prop[:, self.cp_index] = b_new
        lp = np.where(inside, target.log_density(prop), -np.inf)
        log_jac = self.cp_prior.log_jacobian(b) - self.cp_prior.log_jacobian(b_new)
        log_alpha = np.where(inside, lp - logp + log_jac, -np.inf)
        diverged = np.isnan(log_alpha)
        log_alpha = np.where(diverged, -np.inf, log_alpha)
        accept = _uniform_logs(rngs) < log_alpha
        u = np.where(accept[:, None], prop, u)
        logp = np.where(accept, lp, logp)
        alpha = np.exp(np.minimum(log_alpha, 0.0))
        self.adapt.record(it, alpha[:, None], accept[:, None], None)
        return u, logp, diverged


def hierarchical_blocks(model: HierarchicalModel, cfg: McmcConfig) -> list:
    """Default block layout: fixed effects, variance components, one block per
    subject's random-effect triple, plus the shift/scale moves."""
    p = model.priors
    c = cfg.n_chains
    blocks = [
        GroupedRandomWalkBlock("random_effects", model.re_index, model.subject_terms, c, cfg),
        RandomWalkBlock("fixed", np.arange(model.fixed_slice.start, model.fixed_slice.stop), c, cfg,
                        coupled=model.re_index.ravel()),
        # the residual SD is updated on its own: the omegas are nearly pinned
        # given the standardized effects and would shrink a joint proposal
        RandomWalkBlock("noise", [model.index("sigma_eps")], c, cfg),
        RandomWalkBlock("omegas", [model.index(n) for n in ("omega0", "omega2", "omega_cp")], c, cfg),
    ]
    if model.kind.has_transition:
        # DEM's change point is the start of the ramp, so the ramp midpoint is
        # held; the other curves are centred on the change point already
        coef = 0.5 if model.kind is ModelKind.DEM else 0.0
        blocks.append(TransitionShiftBlock(
            "transition", model.index("theta_t"), p.theta_t, model.index("beta_cp"), p.beta_cp,
            coef, c, cfg))
    groups = []
    for col, (loc, sd_name, prior, sd_prior) in enumerate(
        [("beta0", "omega0", p.beta0, p.omega0),
         ("beta2", "omega2", p.beta2, p.omega2),
         ("beta_cp", "omega_cp", p.beta_cp, p.omega_cp)]
    ):
        groups.append({
            "loc": model.index(loc),
            "log_sd": model.index(sd_name),
            "z": model.re_index[:, col],
            "prior": prior,
            "sd_prior": sd_prior,
        })
    blocks.append(ShiftScaleBlock("reparam", groups, c, cfg))
    return blocks


def initialize(policy: str, model, data: LongitudinalDataset | None = None,
               priors: PriorConfig | None = None, rng: np.random.Generator | None = None,
               max_attempts: int = 100) -> ParamState:
    """Starting state with a finite log-posterior.

    ``policy`` is ``"data-informed"`` or ``"prior-draw"``. ``model`` is either
    a :class:`HierarchicalModel` or a model kind (then ``data`` is required).
    """
    hm = model if isinstance(model, HierarchicalModel) else HierarchicalModel(model, data, priors)
    rng = rng if rng is not None else np.random.default_rng(0)
    for _ in range(max_attempts):
        state = hm.initial_state(policy, rng)
        u = hm.from_state(state)
        if np.all(np.isfinite(u)) and np.isfinite(hm.log_density(u)):
            return state
    raise InitializationError(f"no finite starting point after {max_attempts} attempts")


def _chain_start(target, policy, rng, cfg):
    hierarchical = isinstance(target, HierarchicalModel)
    for _ in range(cfg.max_init_attempts):
        if hierarchical:
            u = target.from_state(target.initial_state(policy, rng))
            if policy == "data-informed" and cfg.init_jitter > 0:
                head = target.re_offset
                u[:head] += cfg.init_jitter * rng.standard_normal(head)
        else:
            u = target.initial_point(policy, rng)
        if np.all(np.isfinite(u)) and np.isfinite(target.log_density(u[None])[0]):
            return u
    raise InitializationError(
        f"no finite-logposterior start found in {cfg.max_init_attempts} attempts")


def sample(target, cfg: McmcConfig, init: str | np.ndarray = "data-informed",
           blocks: list | None = None, store_loglik: bool = True,
           progress: Callable[[int], None] | None = None) -> PosteriorDraws:
    """Run ``cfg.n_chains`` chains on ``target`` and keep post-warmup draws.

    ``init`` is a policy name or an explicit ``(n_chains, dim)`` array.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    rngs = [np.random.default_rng(s) for s in seeds]
    if isinstance(init, str):
        u = np.stack([_chain_start(target, init, rng, cfg) for rng in rngs])
    else:
        u = np.array(init, dtype=float).reshape(cfg.n_chains, target.dim)
    logp = target.log_density(u)
    if not np.all(np.isfinite(logp)):
        raise InitializationError("initial points have non-finite log-posterior")
    if blocks is None:
        if isinstance(target, HierarchicalModel):
            blocks = hierarchical_blocks(target, cfg)
        else:
            blocks = [RandomWalkBlock("all", np.arange(target.dim), cfg.n_chains, cfg)]

    pointwise = store_loglik and (
        isinstance(target, HierarchicalModel) or getattr(target, "has_pointwise", False))
    keep = list(range(cfg.n_warmup, cfg.n_iters, cfg.thin))
    n_keep = len(keep)
    store_u = np.empty((cfg.n_chains, n_keep, target.dim))
    store_lp = np.empty((cfg.n_chains, n_keep))
    store_ll = None
    divergences = np.zeros(cfg.n_chains, dtype=int)
    warmup_snapshot = {}
    slot = 0
    for it in range(cfg.n_iters):
        if it == cfg.n_warmup:
            for block in blocks:
                block.adapt.freeze()
                warmup_snapshot[block.name] = block.adapt.snapshot()
            # resynchronise the tracked log-density with a fresh evaluation
            logp = target.log_density(u)
        for block in blocks:
            u, logp, diverged = block.step(target, u, logp, rngs, it)
            divergences += diverged
        if not np.all(np.isfinite(logp)):
            raise DivergenceError(f"non-finite log-posterior at iteration {it}")
        if it >= cfg.n_warmup and (it - cfg.n_warmup) % cfg.thin == 0:
            store_u[:, slot] = u
            store_lp[:, slot] = logp
            if pointwise:
                ll = target.pointwise_loglik(u)
                if store_ll is None:
                    store_ll = np.empty((cfg.n_chains, n_keep, ll.shape[-1]))
                store_ll[:, slot] = ll
            slot += 1
        if progress is not None:
            progress(it)

    draws = target.constrain(store_u)
    return PosteriorDraws(
        names=list(target.param_names),
        draws=np.asarray(draws),
        unconstrained=store_u,
        logpost=store_lp,
        loglik=store_ll,
        acceptance={b.name: b.adapt.rates() for b in blocks},
        divergences=divergences,
        adaptation={b.name: b.adapt.snapshot() for b in blocks},
        warmup_adaptation=warmup_snapshot,
    )


def run_chains(model, data: LongitudinalDataset, priors: PriorConfig | None = None,
               cfg: McmcConfig | None = None, init: str = "data-informed",
               store_loglik: bool = True) -> PosteriorDraws:
    """Fit one change-point model to ``data``; returns constrained draws with
    per-observation log-likelihoods."""
    cfg = cfg if cfg is not None else McmcConfig()
    hm = HierarchicalModel(model, data, priors)
    return sample(hm, cfg, init=init, store_loglik=store_loglik)
