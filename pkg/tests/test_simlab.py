import json
import math

import numpy as np
import pytest

from cpnlmm.diagnostics import summarize
from cpnlmm.sampler import McmcConfig, run_chains
from cpnlmm.simlab import (
    CheckpointError,
    ExperimentReport,
    ScenarioConfig,
    aggregate,
    coverage_ci,
    demo_dataset,
    gen_dataset,
    run_experiment,
)
from cpnlmm.hierarchy import individual_params
from cpnlmm.trajectories import mean_fn

TINY = McmcConfig(n_chains=4, n_iters=500, n_warmup=250, seed=3)
MODELS = ("bsm", "dem")


def tiny_cfg(**kw):
    base = dict(n_replications=2, n_subjects=8, n_occasions=6, seed=77)
    return ScenarioConfig.scenario(1, **{**base, **kw})


# -- data generation -------------------------------------------------------------


def test_gen_dataset_is_deterministic_and_shaped():
    cfg = ScenarioConfig.scenario(1)
    a, ea = gen_dataset(cfg, 3)
    b, eb = gen_dataset(cfg, 3)
    assert a == b and np.array_equal(ea, eb)
    assert a.n_obs == 500 and a.n_subjects == 50
    c, _ = gen_dataset(cfg, 4)
    assert not a == c
    for s in a.subjects:
        assert np.all(np.diff(s.times) >= 0)
        assert s.times.min() >= 0 and s.times.max() <= 20


@pytest.mark.parametrize("number", [1, 2, 3])
def test_noise_free_outputs_equal_the_mean(number):
    cfg = ScenarioConfig.scenario(number, sigma_eps2=0.0, omega0_2=0.0, omega2_2=0.0, omega_cp2=0.0)
    data, eta = gen_dataset(cfg, 0)
    assert np.all(eta == 0)
    th = individual_params(cfg.fixed_effects, (0.0, 0.0, 0.0))
    for s in data.subjects:
        assert np.array_equal(s.outcomes, mean_fn(cfg.dgp, s.times, th))


def test_random_intercept_variance():
    cfg = ScenarioConfig.scenario(2, n_subjects=10_000, n_occasions=2)
    data, eta = gen_dataset(cfg, 0)
    assert np.var(eta[:, 0], ddof=1) == pytest.approx(0.3, rel=0.05)


def test_subject_change_points_inside_follow_up():
    cfg = ScenarioConfig.scenario(3, n_subjects=2000, n_occasions=2)
    _, eta = gen_dataset(cfg, 0)
    cp = cfg.beta_cp + eta[:, 2]
    assert np.all((cp > 0) & (cp < cfg.t_max))


def test_scenario_presets_and_validation(tmp_path):
    assert ScenarioConfig.scenario(2).dgp.value == "bsm"
    assert ScenarioConfig.scenario(3).t_max == 15.0
    with pytest.raises(ValueError):
        ScenarioConfig.scenario(4)
    with pytest.raises(ValueError):
        ScenarioConfig(beta_cp=25.0)
    cfg = ScenarioConfig.scenario(1, n_subjects=12)
    cfg.to_json(tmp_path / "s.json")
    assert ScenarioConfig.from_json(tmp_path / "s.json") == cfg


def test_demo_dataset():
    data, truth = demo_dataset(seed=5, n_subjects=30)
    assert data.n_subjects == 30
    lo, hi = data.time_range()
    assert 49 <= lo and hi <= 96
    assert truth["beta_cp"] > 70
    assert data == demo_dataset(seed=5, n_subjects=30)[0]


# -- coverage -----------------------------------------------------------------------


def test_coverage_ci_examples():
    p, lo, hi = coverage_ci(0, 10)
    assert p == 0.0 and lo == 0.0 and hi == pytest.approx(0.2775, abs=1e-4)
    p, lo, hi = coverage_ci(10, 10)
    assert p == 1.0 and lo == pytest.approx(0.7225, abs=1e-4) and hi == 1.0
    p, lo, hi = coverage_ci(920, 1000)
    assert p == 0.92
    # Table-1 shape: a 0.92 coverage carries an interval of about +-0.02
    assert lo == pytest.approx(0.9015, abs=1e-3) and hi == pytest.approx(0.9353, abs=1e-3)
    with pytest.raises(ValueError):
        coverage_ci(1, 0)


def test_coverage_ci_against_wilson_formula():
    z = 1.959963984540054
    for hits, n in [(3, 7), (45, 50), (1, 1)]:
        p = hits / n
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
        _, lo, hi = coverage_ci(hits, n)
        assert lo == pytest.approx(max(0, centre - half), abs=1e-12)
        assert hi == pytest.approx(min(1, centre + half), abs=1e-12)


# -- experiments -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt")
    report = run_experiment(tiny_cfg(), TINY, models=MODELS, checkpoint_dir=ckpt, workers=1)
    return report, ckpt


def test_report_shape(tiny_run):
    report, ckpt = tiny_run
    assert [r.model for r in report.rows] == list(MODELS)
    assert len(report.records) == 4
    assert sorted(p.name for p in ckpt.iterdir()) == ["rep_0000.json", "rep_0001.json"]
    for row in report.rows:
        assert 0 <= row.coverage <= 1
        assert row.n_ok + row.n_failed == 2
    ok = [r for r in report.records if r["status"] == "ok"]
    for rep in (0, 1):
        pmps = [r["pmp"] for r in ok if r["replication"] == rep]
        assert sum(pmps) == pytest.approx(1.0, abs=1e-12)


def test_aggregation_equals_recomputation(tiny_run):
    report, _ = tiny_run
    assert aggregate(report.records, MODELS) == report.rows
    for m in MODELS:
        ok = [r for r in report.records if r["model"] == m and r["status"] == "ok"]
        bias = [r["cp_median"] - 10.0 for r in ok]
        assert report[m].bias_median == pytest.approx(float(np.median(bias)), abs=1e-12)
        assert report[m].pmp_mean == pytest.approx(float(np.mean([r["pmp"] for r in ok])), abs=1e-12)


def test_resume_gives_identical_bytes(tiny_run, tmp_path):
    report, ckpt = tiny_run
    report.to_json(tmp_path / "a.json")
    resumed = run_experiment(tiny_cfg(), TINY, models=MODELS, checkpoint_dir=ckpt, workers=1)
    resumed.to_json(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = ExperimentReport.from_json(tmp_path / "a.json")
    assert [r.model for r in back.rows] == list(MODELS)


def test_partial_resume_and_determinism(tiny_run, tmp_path):
    report, ckpt = tiny_run
    part = tmp_path / "part"
    part.mkdir()
    # keep only the first replication; the second is recomputed
    (part / "rep_0000.json").write_bytes((ckpt / "rep_0000.json").read_bytes())
    again = run_experiment(tiny_cfg(), TINY, models=MODELS, checkpoint_dir=part, workers=1)
    report.to_json(tmp_path / "a.json")
    again.to_json(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_corrupt_checkpoint_names_file(tiny_run, tmp_path):
    _, ckpt = tiny_run
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "rep_0001.json").write_text("{not json")
    with pytest.raises(CheckpointError, match="rep_0001.json"):
        run_experiment(tiny_cfg(), TINY, models=MODELS, checkpoint_dir=bad, workers=1)
    other = tmp_path / "other"
    other.mkdir()
    (other / "rep_0000.json").write_bytes((ckpt / "rep_0000.json").read_bytes())
    with pytest.raises(CheckpointError, match="different configuration"):
        run_experiment(tiny_cfg(seed=78), TINY, models=MODELS, checkpoint_dir=other, workers=1)


def test_single_replication_is_flagged(tmp_path):
    report = run_experiment(tiny_cfg(n_replications=1), TINY, models=("bsm",), workers=1)
    assert len(report.records) == 1
    assert report["bsm"].degenerate
    report.to_csv(tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["model", "n_ok", "n_failed", "cp_median"]


def test_failed_fits_are_counted(monkeypatch):
    import cpnlmm.simlab as simlab

    def boom(*args, **kwargs):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(simlab, "fit_model", boom)
    report = run_experiment(tiny_cfg(n_replications=1), TINY, models=MODELS, workers=1)
    assert report.n_failed == 2
    assert all(r["status"] == "failed" and "synthetic failure" in r["error"] for r in report.records)
    assert all(row.n_failed == 1 and row.degenerate for row in report.rows)
    json.dumps(report.to_dict(), allow_nan=True)


@pytest.mark.parametrize("kind, number", [("dem", 1), ("bsm", 2)])
def test_dgp_consistency(kind, number):
    cfg = ScenarioConfig.scenario(number, n_subjects=200, sigma_eps2=0.01, omega_cp2=0.5)
    data, _ = gen_dataset(cfg, 0)
    draws = run_chains(kind, data, cfg=McmcConfig.desk(seed=1))
    assert summarize(draws, params=["beta_cp"])["beta_cp"].median == pytest.approx(10.0, abs=0.3)
