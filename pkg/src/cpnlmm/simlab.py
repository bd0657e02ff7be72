"""Simulation study: scenario data generation, replicated fits and the
aggregated bias / coverage / model-selection report."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from scipy import stats

from .diagnostics import _atomic_write, _json_safe
from .fitting import derived_seed, fit_model
from .hierarchy import FixedEffects, LongitudinalDataset, PriorConfig, Subject, individual_params
from .sampler import McmcConfig
from .selection import posterior_model_probs
from .trajectories import ModelKind, mean_fn

__all__ = [
    "ScenarioConfig",
    "gen_dataset",
    "coverage_ci",
    "CheckpointError",
    "ModelSummary",
    "ExperimentReport",
    "fit_replication",
    "run_experiment",
    "aggregate",
    "demo_dataset",
]

MODELS = tuple(m.value for m in ModelKind)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioConfig:
    """Data-generating process and replication settings for one scenario.

    ``beta2`` is the post change-point slope for linear generators and the
    decay-rate magnitude for the DEM generator.
    """

    name: str = "scenario1"
    dgp: ModelKind = ModelKind.DEM
    n_replications: int = 50
    n_subjects: int = 50
    n_occasions: int = 10
    t_max: float = 20.0
    beta0: float = 11.0
    beta1: float = 0.0
    beta2: float = 0.5
    beta_cp: float = 10.0
    theta_t: float = 3.0
    sigma_eps2: float = 1.4
    omega0_2: float = 0.3
    omega2_2: float = 0.1
    omega_cp2: float = 2.0
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "dgp", ModelKind.parse(self.dgp))
        for name in ("sigma_eps2", "omega0_2", "omega2_2", "omega_cp2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.beta_cp < self.t_max:
            raise ValueError("beta_cp must lie inside (0, t_max)")
        if self.n_replications < 1 or self.n_subjects < 1 or self.n_occasions < 1:
            raise ValueError("replication, subject and occasion counts must be positive")

    @classmethod
    def scenario(cls, number: int, **overrides) -> "ScenarioConfig":
        """The three study scenarios: 1 = DEM generator, 2 = BSM generator,
        3 = DEM generator with follow-up truncated at 15."""
        presets = {
            1: dict(name="scenario1", dgp=ModelKind.DEM, beta2=0.5, t_max=20.0),
            2: dict(name="scenario2", dgp=ModelKind.BSM, beta2=-0.5, t_max=20.0),
            3: dict(name="scenario3", dgp=ModelKind.DEM, beta2=0.5, t_max=15.0),
        }
        if number not in presets:
            raise ValueError("scenario must be 1, 2 or 3")
        return cls(**{**presets[number], **overrides})

    @property
    def fixed_effects(self) -> FixedEffects:
        return FixedEffects(self.beta0, self.beta1, self.beta2, self.beta_cp, self.theta_t)

    @property
    def omegas(self) -> np.ndarray:
        return np.sqrt([self.omega0_2, self.omega2_2, self.omega_cp2])

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["dgp"] = self.dgp.value
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        return cls(**doc)

    def to_json(self, path) -> None:
        _atomic_write(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _subject_rng(cfg: ScenarioConfig, replication: int, subject: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(replication, subject)))


def gen_dataset(cfg: ScenarioConfig, replication: int = 0):
    """Generate one replicate dataset.

    Returns the dataset and the true random effects, shape ``(n_subjects, 3)``
    with columns ``(eta0, eta2, eta_cp)``. Subjects whose change point falls
    outside ``(0, t_max)``, or whose DEM decay rate is negative, have their
    random effects redrawn.
    """
    fixed = cfg.fixed_effects
    omegas = cfg.omegas
    sigma = math.sqrt(cfg.sigma_eps2)
    subjects = []
    effects = np.empty((cfg.n_subjects, 3))
    for i in range(cfg.n_subjects):
        rng = _subject_rng(cfg, replication, i)
        times = np.sort(rng.uniform(0.0, cfg.t_max, cfg.n_occasions))
        for _ in range(10_000):
            eta = rng.normal(0.0, 1.0, 3) * omegas
            th = individual_params(fixed, eta)
            ok = 0 < th.theta_cp < cfg.t_max
            if cfg.dgp is ModelKind.DEM:
                ok = ok and th.theta2 >= 0 and th.theta0 > 0
            if ok:
                break
        else:  # pragma: no cover - needs absurd variances
            raise RuntimeError("could not draw admissible individual parameters")
        mu = mean_fn(cfg.dgp, times, th)
        y = mu + sigma * rng.standard_normal(cfg.n_occasions)
        subjects.append(Subject(f"s{i:03d}", times, y))
        effects[i] = eta
    return LongitudinalDataset(subjects), effects


def demo_dataset(seed: int = 2024, n_subjects: int = 120):
    """Synthetic cohort resembling a biennial ageing study (time = age).

    Trajectories follow the DEM with population values close to the DEM
    column of the published real-data fit (word-recall scale, change point
    near age 74). Entry ages are uniform on [50, 80]; each subject has 3 to 8
    waves two years apart, with a little jitter. This is not real data.

    Returns the dataset and the true parameters as a dict.
    """
    truth = dict(beta0=11.22, beta1=0.0, beta2=0.05, beta_cp=74.28, theta_t=3.63,
                 sigma_eps=2.24, omega0=2.16, omega2=0.03, omega_cp=8.39)
    fixed = FixedEffects(truth["beta0"], 0.0, truth["beta2"], truth["beta_cp"], truth["theta_t"])
    omegas = np.array([truth["omega0"], truth["omega2"], truth["omega_cp"]])
    root = np.random.SeedSequence(seed)
    subjects = []
    for i, child in enumerate(root.spawn(n_subjects)):
        rng = np.random.default_rng(child)
        entry = rng.uniform(50.0, 80.0)
        waves = int(rng.integers(3, 9))
        ages = entry + 2.0 * np.arange(waves) + rng.uniform(-0.25, 0.25, waves)
        ages = np.sort(np.round(ages, 2))
        for _ in range(10_000):
            eta = rng.standard_normal(3) * omegas
            th = individual_params(fixed, eta)
            if 50.0 < th.theta_cp < 100.0 and th.theta2 >= 0 and th.theta0 > 0:
                break
        y = mean_fn(ModelKind.DEM, ages, th) + truth["sigma_eps"] * rng.standard_normal(waves)
        subjects.append(Subject(f"p{i:04d}", ages, np.round(y, 3)))
    return LongitudinalDataset(subjects), truth


def coverage_ci(hits: int, trials: int, level: float = 0.95) -> tuple[float, float, float]:
    """Proportion ``hits / trials`` with its Wilson score interval."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= hits <= trials:
        raise ValueError("hits must lie in [0, trials]")
    z = float(stats.norm.ppf(0.5 + level / 2))
    p = hits / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == trials else min(1.0, centre + half)
    return p, lo, hi


class CheckpointError(RuntimeError):
    """A replication checkpoint exists but cannot be used."""


def fit_replication(cfg: ScenarioConfig, mcmc: McmcConfig, replication: int,
                    models=MODELS, priors: PriorConfig | None = None) -> list[dict]:
    """Fit every model to one replicate dataset; one record per model.

    A failing fit yields a record with ``status="failed"`` and the error text;
    posterior model probabilities are computed over the models that succeeded.
    """
    data, _ = gen_dataset(cfg, replication)
    truth = cfg.beta_cp
    records = []
    for kind in models:
        kind = ModelKind.parse(kind)
        k = list(ModelKind).index(kind)
        run = replace(mcmc, seed=derived_seed(cfg.seed, mcmc.seed, replication, k))
        rec = {"replication": replication, "model": kind.value}
        try:
            fit = fit_model(kind, data, priors, run, evidence=True)
        except Exception as exc:  # noqa: BLE001 - failures are recorded, never dropped
            log.warning("replication %d, %s failed: %s", replication, kind.value, exc)
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            records.append(rec)
            continue
        est, lo, hi = fit.cp_estimate()
        rec.update(
            status="ok",
            cp_median=est,
            cp_lo=lo,
            cp_hi=hi,
            bias=est - truth,
            covered=bool(lo <= truth <= hi),
            waic=fit.waic.waic,
            waic_se=fit.waic.se,
            log_marginal=fit.evidence.log_marginal,
            bridge_iterations=fit.evidence.iterations,
            bridge_rel_mcse=fit.evidence.rel_mcse,
            max_rhat=fit.max_rhat,
        )
        records.append(rec)
    ok = [r for r in records if r["status"] == "ok"]
    if ok:
        cmp_ = posterior_model_probs({r["model"]: r["log_marginal"] for r in ok})
        best = min(ok, key=lambda r: r["waic"])["model"]
        for r in ok:
            r["pmp"] = cmp_[r["model"]]
            r["lowest_waic"] = r["model"] == best
    return records


@dataclass(frozen=True)
class ModelSummary:
    """Table-1 style aggregate for one fitted model."""

    model: str
    n_ok: int
    n_failed: int
    cp_median: float
    cp_lo: float
    cp_hi: float
    bias_median: float
    bias_lo: float
    bias_hi: float
    coverage: float
    coverage_lo: float
    coverage_hi: float
    pmp_mean: float
    waic_mean: float
    waic_se: float
    lowest_waic_rate: float
    degenerate: bool = False


def _percentiles(x):
    lo, mid, hi = np.percentile(x, [2.5, 50.0, 97.5])
    return float(mid), float(lo), float(hi)


def aggregate(records: list[dict], models=MODELS) -> list[ModelSummary]:
    """Aggregate per-replication records into one row per model.

    Point-estimate and bias summaries are the median and the 2.5/97.5
    percentiles across replications; coverage carries a Wilson interval;
    WAIC is averaged together with its per-replication standard error.
    """
    rows = []
    nan = float("nan")
    for m in models:
        mine = sorted((r for r in records if r["model"] == m), key=lambda r: r["replication"])
        ok = [r for r in mine if r["status"] == "ok"]
        failed = len(mine) - len(ok)
        if not ok:
            rows.append(ModelSummary(m, 0, failed, *([nan] * 13), degenerate=True))
            continue
        est = np.array([r["cp_median"] for r in ok])
        bias = np.array([r["bias"] for r in ok])
        hits = sum(bool(r["covered"]) for r in ok)
        cov, cov_lo, cov_hi = coverage_ci(hits, len(ok))
        rows.append(ModelSummary(
            model=m,
            n_ok=len(ok),
            n_failed=failed,
            cp_median=_percentiles(est)[0],
            cp_lo=_percentiles(est)[1],
            cp_hi=_percentiles(est)[2],
            bias_median=_percentiles(bias)[0],
            bias_lo=_percentiles(bias)[1],
            bias_hi=_percentiles(bias)[2],
            coverage=cov,
            coverage_lo=cov_lo,
            coverage_hi=cov_hi,
            pmp_mean=float(np.mean([r["pmp"] for r in ok])),
            waic_mean=float(np.mean([r["waic"] for r in ok])),
            waic_se=float(np.mean([r["waic_se"] for r in ok])),
            lowest_waic_rate=float(np.mean([bool(r["lowest_waic"]) for r in ok])),
            # a single replication has no spread to summarise
            degenerate=len(ok) < 2,
        ))
    return rows


@dataclass
class ExperimentReport:
    """Aggregated simulation results plus the raw per-replication records."""

    scenario: dict
    mcmc: dict
    rows: list[ModelSummary]
    records: list[dict] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(r["status"] != "ok" for r in self.records)

    def __getitem__(self, model: str) -> ModelSummary:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "mcmc": self.mcmc,
            "n_failed": self.n_failed,
            "summary": [asdict(r) for r in self.rows],
            "records": self.records,
        }

    def to_json(self, path) -> None:
        _atomic_write(path, json.dumps(_json_safe(self.to_dict()), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        names = [f.name for f in ModelSummary.__dataclass_fields__.values()]
        lines = [",".join(names)]
        for r in self.rows:
            vals = []
            for n in names:
                v = getattr(r, n)
                if isinstance(v, bool):
                    vals.append(str(int(v)))
                elif isinstance(v, float):
                    vals.append(repr(v))
                else:
                    vals.append(str(v))
            lines.append(",".join(vals))
        _atomic_write(path, "\n".join(lines) + "\n")

    @classmethod
    def from_json(cls, path) -> "ExperimentReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = [ModelSummary(**{k: (float("nan") if v is None else v) for k, v in r.items()})
                for r in doc["summary"]]
        return cls(doc["scenario"], doc["mcmc"], rows, doc["records"])


def _checkpoint_path(directory: Path, replication: int) -> Path:
    return directory / f"rep_{replication:04d}.json"


def _load_checkpoint(path: Path, fingerprint: dict) -> list[dict] | None:
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        records = doc["records"]
        stored = doc["fingerprint"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if stored != fingerprint:
        raise CheckpointError(f"checkpoint {path} was written by a different configuration")
    return [{k: (float("nan") if v is None else v) for k, v in r.items()} for r in records]


def _workers(requested: int | None) -> int:
    cap = os.environ.get("CPNLMM_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"CPNLMM_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def _replication_task(args):
    cfg, mcmc, rep, models, priors = args
    return rep, fit_replication(cfg, mcmc, rep, models, priors)


def run_experiment(cfg: ScenarioConfig, mcmc: McmcConfig | None = None, *,
                   models=MODELS, priors: PriorConfig | None = None,
                   checkpoint_dir=None, workers: int | None = None,
                   progress=None) -> ExperimentReport:
    """Replicate generate-fit-score ``cfg.n_replications`` times.

    Parameters
    ----------
    cfg : ScenarioConfig
    mcmc : McmcConfig, optional
        Defaults to the desk preset. Per-fit seeds are derived from
        ``(cfg.seed, mcmc.seed, replication, model)``.
    checkpoint_dir : path, optional
        One JSON file per finished replication; existing files are reused,
        so an interrupted run resumes where it stopped.
    workers : int, optional
        Process count, capped by ``CPNLMM_THREADS``. Results do not depend
        on it.
    """
    mcmc = mcmc if mcmc is not None else McmcConfig.desk()
    models = tuple(ModelKind.parse(m).value for m in models)
    fingerprint = {"scenario": cfg.to_dict(), "mcmc": mcmc.to_dict(), "models": list(models),
                   "priors": (priors or PriorConfig()).to_dict()}
    fingerprint = json.loads(json.dumps(_json_safe(fingerprint)))
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    results: dict[int, list[dict]] = {}
    todo = []
    for rep in range(cfg.n_replications):
        cached = _load_checkpoint(_checkpoint_path(ckpt, rep), fingerprint) if ckpt else None
        if cached is not None:
            results[rep] = cached
        else:
            todo.append(rep)

    def done(rep, records):
        results[rep] = records
        if ckpt is not None:
            doc = {"fingerprint": fingerprint, "records": records}
            _atomic_write(_checkpoint_path(ckpt, rep),
                          json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")
        if progress is not None:
            progress(rep)

    n_workers = min(_workers(workers), max(1, len(todo)))
    tasks = [(cfg, mcmc, rep, models, priors) for rep in todo]
    if n_workers == 1:
        for task in tasks:
            done(*_replication_task(task))
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for rep, records in pool.map(_replication_task, tasks):
                done(rep, records)

    records = [r for rep in sorted(results) for r in results[rep]]
    # round-trip through JSON so fresh and resumed runs give identical reports
    records = json.loads(json.dumps(_json_safe(records)))
    records = [{k: (float("nan") if v is None else v) for k, v in r.items()} for r in records]
    failed = sum(r["status"] != "ok" for r in records)
    if failed:
        log.warning("%d of %d fits failed and were excluded from the aggregates",
                    failed, len(records))
    return ExperimentReport(cfg.to_dict(), mcmc.to_dict(), aggregate(records, models), records)
