"""Command-line interface: ``fit``, ``simulate``, ``compare``, ``diagnose``.

Exit codes are a stable contract: 0 success, 1 usage or configuration error,
2 data error, 3 numerical or fitting error. Every file is written inside
``--out`` via a temporary file and an atomic rename.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import ChainDiagnostics, _atomic_write, _json_safe, summarize
from .fitting import fit_models, population_params
from .hierarchy import DatasetError, LongitudinalDataset, PriorConfig
from .io import export_csv, ingest_csv
from .sampler import DivergenceError, InitializationError, McmcConfig, PosteriorDraws
from .selection import BridgeConvergenceError, ComparisonReport, SingularProposalError
from .simlab import CheckpointError, ScenarioConfig, demo_dataset, gen_dataset, run_experiment
from .trajectories import ModelKind, SingularSystemError

__all__ = ["main", "RunConfig", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_FIT"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3
RHAT_THRESHOLD = 1.01
ALL_MODELS = [m.value for m in ModelKind]

log = logging.getLogger("cpnlmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Settings of one command, merged from flags and an optional JSON file.

    Flags win over the file. The file may hold ``mcmc`` (McmcConfig fields),
    ``priors`` (a PriorConfig document, or ``"table-b1"`` / ``"data"``),
    ``model_priors`` (model -> probability) and ``scenario``.
    """

    command: str
    out: Path
    seed: int | None = None
    models: list[str] = field(default_factory=lambda: list(ALL_MODELS))
    data: Path | None = None
    mcmc: McmcConfig | None = None
    priors: str | dict = "auto"
    model_priors: dict | None = None
    interval: str = "quantile"
    level: float = 0.95
    center_time: float | None = None
    dump_draws: bool = False
    demo: bool = False
    scenario: ScenarioConfig | None = None
    fit_dir: Path | None = None
    export_data: bool = False


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpnlmm", description="Bayesian change-point mixed models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--verbose", "-v", action="store_true")

    def sampling(p):
        p.add_argument("--chains", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--warmup", type=int)
        p.add_argument("--scale", choices=["desk", "paper"], default=None)

    p = sub.add_parser("fit", help="fit change-point models to a dataset")
    common(p)
    sampling(p)
    p.add_argument("--model", default="all", choices=ALL_MODELS + ["all"])
    p.add_argument("--data", type=Path, help="long-format CSV with header id,time,y")
    p.add_argument("--demo", action="store_true", help="use a synthetic demo cohort instead of --data")
    p.add_argument("--interval", choices=["quantile", "hpd"], default=None)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--center-time", type=float, default=None)
    p.add_argument("--dump-draws", action="store_true")

    p = sub.add_parser("simulate", help="run a simulation scenario or write the demo dataset")
    common(p)
    sampling(p)
    p.add_argument("--scenario", type=int, choices=[1, 2, 3], default=None)
    p.add_argument("--n-reps", type=int, default=None)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--model", default="all", choices=ALL_MODELS + ["all"])
    p.add_argument("--export-data", action="store_true", help="also write each replicate dataset")
    p.add_argument("--demo", action="store_true", help="only write the synthetic demo dataset")

    p = sub.add_parser("compare", help="recompute model probabilities from stored marginals")
    common(p)
    p.add_argument("--fit-dir", type=Path, help="directory written by 'fit' (default: --out)")
    p.add_argument("--model-priors", default=None, help="e.g. bsm=0.1,bwm=0.1,bcr=0.1,dem=0.7")

    p = sub.add_parser("diagnose", help="recompute summaries from dumped draws")
    common(p)
    p.add_argument("--fit-dir", type=Path, help="directory written by 'fit --dump-draws'")
    p.add_argument("--interval", choices=["quantile", "hpd"], default=None)
    p.add_argument("--level", type=float, default=None)
    return parser


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _parse_model_priors(text: str) -> dict:
    out = {}
    for item in text.split(","):
        name, _, value = item.partition("=")
        try:
            out[ModelKind.parse(name.strip()).value] = float(value)
        except ValueError as exc:
            raise UsageError(f"bad --model-priors entry {item!r}: {exc}") from None
    return out


def _mcmc_from(args, doc: dict, seed: int | None) -> McmcConfig:
    base = doc.get("mcmc", {})
    scale = getattr(args, "scale", None) or doc.get("scale", "desk")
    try:
        cfg = McmcConfig.paper() if scale == "paper" else McmcConfig.desk()
        if base:
            cfg = McmcConfig.from_dict({**cfg.to_dict(), **base})
        overrides = {k: v for k, v in (("n_chains", args.chains), ("n_iters", args.iters),
                                       ("n_warmup", args.warmup)) if v is not None}
        if "n_iters" in overrides and "n_warmup" not in overrides:
            overrides["n_warmup"] = overrides["n_iters"] // 2
        if seed is not None:
            overrides["seed"] = seed
        return replace(cfg, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid MCMC settings: {exc}") from None


def resolve(argv=None) -> RunConfig:
    """Parse arguments into a :class:`RunConfig`; raises ``UsageError``."""
    args = _build_parser().parse_args(argv)
    doc = _read_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is not None and not 0 <= int(seed) < 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    rc = RunConfig(command=args.command, out=args.out, seed=None if seed is None else int(seed))
    if args.command in ("fit", "simulate"):
        if rc.seed is None:
            raise UsageError("a seed is required (--seed or 'seed' in --config)")
        model = getattr(args, "model", "all")
        rc.models = list(ALL_MODELS) if model == "all" else [model]
        rc.mcmc = _mcmc_from(args, doc, rc.seed)
        rc.priors = doc.get("priors", "auto")
        rc.demo = args.demo
    if args.command == "fit":
        if args.data is None and not args.demo:
            raise UsageError("fit needs --data or --demo")
        rc.data = args.data
        rc.interval = args.interval or doc.get("interval", "quantile")
        rc.level = args.level if args.level is not None else float(doc.get("level", 0.95))
        rc.center_time = args.center_time if args.center_time is not None else doc.get("center_time")
        rc.dump_draws = args.dump_draws or bool(doc.get("dump_draws", False))
        rc.model_priors = doc.get("model_priors")
    elif args.command == "simulate":
        scen = doc.get("scenario")
        try:
            if isinstance(scen, dict):
                cfg = ScenarioConfig.from_dict(scen)
            else:
                cfg = ScenarioConfig.scenario(args.scenario or (scen or 1))
            overrides = {"seed": rc.seed}
            if args.n_reps is not None:
                overrides["n_replications"] = args.n_reps
            if args.n_subjects is not None:
                overrides["n_subjects"] = args.n_subjects
            rc.scenario = replace(cfg, **overrides)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid scenario settings: {exc}") from None
        rc.export_data = args.export_data
    elif args.command == "compare":
        rc.fit_dir = args.fit_dir or args.out
        if args.model_priors:
            rc.model_priors = _parse_model_priors(args.model_priors)
        else:
            rc.model_priors = doc.get("model_priors")
    elif args.command == "diagnose":
        rc.fit_dir = args.fit_dir or args.out
        rc.interval = args.interval
        rc.level = args.level
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return rc


# -- commands -----------------------------------------------------------------


def _dump(path: Path, doc) -> None:
    _atomic_write(path, json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")


def _priors_for(spec, data: LongitudinalDataset) -> tuple[PriorConfig, str]:
    if isinstance(spec, dict):
        return PriorConfig.from_dict(spec), "config"
    if spec == "table-b1":
        return PriorConfig.table_b1(), "table-b1"
    if spec == "data":
        return PriorConfig.from_data(data), "data"
    if spec != "auto":
        raise UsageError(f"unknown priors setting {spec!r}")
    lo, hi = data.time_range()
    # the published priors assume study time on [0, 20]
    if lo >= 0.0 and hi <= 20.0:
        return PriorConfig.table_b1(), "table-b1"
    return PriorConfig.from_data(data), "data"


def cmd_fit(rc: RunConfig) -> int:
    if rc.demo:
        data, truth = demo_dataset(seed=rc.seed % 2**32)
        source = "synthetic demo cohort (not real data)"
    else:
        if not rc.data.is_file():
            raise FileNotFoundError(f"dataset not found: {rc.data}")
        data = ingest_csv(rc.data)
        truth = None
        source = str(rc.data)
    offset = rc.center_time or 0.0
    if offset:
        data = data.shift_time(offset)
    priors, prior_source = _priors_for(rc.priors, data)
    rc.out.mkdir(parents=True, exist_ok=True)
    if rc.demo:
        export_csv(data.shift_time(-offset) if offset else data, rc.out / "demo_data.csv")

    fits, report = fit_models(rc.models, data, priors, rc.mcmc, model_priors=rc.model_priors,
                              interval=rc.interval, level=rc.level)
    max_rhat = {}
    for name, fit in fits.items():
        draws = fit.draws
        if offset:
            # report change points on the original time scale
            j = draws.names.index("beta_cp")
            draws.draws[..., j] += offset
            fit.summary = summarize(draws, level=rc.level, kind=rc.interval,
                                    params=population_params(fit.hierarchical))
        mdir = rc.out / name
        fit.summary.to_csv(mdir / "summary.csv")
        fit.summary.to_json(mdir / "summary.json")
        if rc.dump_draws:
            draws.to_csv(mdir / "draws")
        max_rhat[name] = fit.max_rhat
        _dump(mdir / "selection.json", {
            "model": name,
            "waic": fit.waic.waic, "waic_se": fit.waic.se,
            "lppd": fit.waic.lppd, "p_waic": fit.waic.p_waic,
            "log_marginal": fit.evidence.log_marginal,
            "bridge_iterations": fit.evidence.iterations,
            "bridge_rel_mcse": fit.evidence.rel_mcse,
            "acceptance": {k: float(np.mean(v)) for k, v in draws.acceptance.items()},
            "divergences": int(np.sum(draws.divergences)) if draws.divergences is not None else 0,
        })
    report.to_csv(rc.out / "comparison.csv")
    report.to_json(rc.out / "comparison.json")
    flagged = sorted(m for m, r in max_rhat.items() if not r < RHAT_THRESHOLD)
    if flagged:
        log.warning("R-hat above %.2f for: %s", RHAT_THRESHOLD, ", ".join(flagged))
    _dump(rc.out / "fit.json", {
        "command": "fit",
        "data": source,
        "synthetic": rc.demo,
        "truth": truth,
        "n_subjects": data.n_subjects,
        "n_obs": data.n_obs,
        "models": list(fits),
        "seed": rc.seed,
        "mcmc": rc.mcmc.to_dict(),
        "priors": priors.to_dict(),
        "prior_source": prior_source,
        "center_time": offset,
        "interval": rc.interval,
        "level": rc.level,
        "max_rhat": max_rhat,
        "rhat_threshold": RHAT_THRESHOLD,
        "rhat_warning": bool(flagged),
        "rhat_flagged": flagged,
        "draws_dumped": rc.dump_draws,
    })
    print(f"fitted {', '.join(fits)}; best by WAIC: {report.best('waic')}; "
          f"highest PMP: {report.best('pmp')}")
    return EXIT_OK


def cmd_simulate(rc: RunConfig) -> int:
    rc.out.mkdir(parents=True, exist_ok=True)
    if rc.demo:
        data, truth = demo_dataset(seed=rc.seed % 2**32)
        export_csv(data, rc.out / "demo_data.csv")
        _dump(rc.out / "demo_data.json", {"synthetic": True, "seed": rc.seed, "truth": truth,
                                          "n_subjects": data.n_subjects, "n_obs": data.n_obs})
        print(f"wrote synthetic demo dataset ({data.n_subjects} subjects, {data.n_obs} rows)")
        return EXIT_OK
    cfg = rc.scenario
    cfg.to_json(rc.out / "scenario.json")
    if rc.export_data:
        for rep in range(cfg.n_replications):
            data, _ = gen_dataset(cfg, rep)
            export_csv(data, rc.out / "data" / f"rep_{rep:04d}.csv")
    report = run_experiment(cfg, rc.mcmc, models=rc.models, checkpoint_dir=rc.out / "checkpoints")
    report.to_csv(rc.out / "report.csv")
    report.to_json(rc.out / "report.json")
    print(f"{cfg.name}: {cfg.n_replications} replications, {report.n_failed} failed fits")
    return EXIT_OK


def cmd_compare(rc: RunConfig) -> int:
    source = rc.fit_dir / "comparison.json"
    if not source.is_file():
        raise FileNotFoundError(f"no comparison.json in {rc.fit_dir}")
    stored = ComparisonReport.from_json(source)
    try:
        report = stored.reweight(rc.model_priors)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rc.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(rc.out / "comparison.csv")
    report.to_json(rc.out / "comparison.json", extra={"model_priors": rc.model_priors})
    for r in report.rows:
        print(f"{r['model']}: pmp={r['pmp']:.4f} waic={r['waic']:.2f}")
    return EXIT_OK


def cmd_diagnose(rc: RunConfig) -> int:
    meta_path = rc.fit_dir / "fit.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    kind = rc.interval or meta.get("interval", "quantile")
    level = rc.level if rc.level is not None else float(meta.get("level", 0.95))
    models = [m for m in ALL_MODELS if (rc.fit_dir / m / "draws").is_dir()]
    if not models:
        raise FileNotFoundError(f"no dumped draws under {rc.fit_dir} (fit with --dump-draws)")
    result = {}
    for m in models:
        draws = PosteriorDraws.from_csv(rc.fit_dir / m / "draws")
        params = [n for n in draws.names if "[" not in n]
        summary = summarize(draws, level=level, kind=kind, params=params)
        summary.to_csv(rc.out / m / "summary.csv")
        summary.to_json(rc.out / m / "summary.json")
        fit_time = rc.fit_dir / m / "summary.csv"
        identical = None
        if fit_time.is_file() and kind == meta.get("interval") and level == meta.get("level"):
            identical = ChainDiagnostics.from_csv(fit_time, level, kind) == summary
        flagged = not summary.max_rhat < RHAT_THRESHOLD
        result[m] = {"max_rhat": summary.max_rhat, "rhat_warning": flagged,
                     "matches_fit_summary": identical}
        print(f"{m}: max R-hat {summary.max_rhat:.4f}"
              + ("" if identical is None else f"; matches fit-time summary: {identical}"))
    _dump(rc.out / "diagnose.json", {"interval": kind, "level": level, "models": result})
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "compare": cmd_compare,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    try:
        rc = resolve(argv)
    except UsageError as exc:
        print(f"cpnlmm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[rc.command](rc)
    except UsageError as exc:
        print(f"cpnlmm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"cpnlmm: data error [{type(exc).__module__}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return EXIT_DATA
    except (InitializationError, DivergenceError, BridgeConvergenceError,
            SingularProposalError, SingularSystemError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"cpnlmm: fit error [{type(exc).__module__}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
