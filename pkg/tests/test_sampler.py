import math
import warnings

import numpy as np
import pytest
from scipy import stats

from cpnlmm.diagnostics import effective_sample_size, split_rhat
from cpnlmm.hierarchy import HierarchicalModel, PriorConfig, _normal_logpdf
from cpnlmm.sampler import (
    DensityTarget,
    InitializationError,
    McmcConfig,
    PosteriorDraws,
    initialize,
    run_chains,
    sample,
)
from cpnlmm.simlab import ScenarioConfig, gen_dataset


def std_normal():
    return DensityTarget(lambda u: -0.5 * np.sum(u * u, axis=-1), dim=1)


def mcse(x):
    return x.std() / math.sqrt(effective_sample_size(x))


def test_standard_normal_toy():
    cfg = McmcConfig(n_chains=4, n_iters=3500, n_warmup=1000, seed=1)
    draws = sample(std_normal(), cfg, init="prior-draw")
    x = draws.draws[..., 0]
    assert x.size == 10_000
    assert abs(x.mean()) < 3 * mcse(x)
    assert x.std() == pytest.approx(1.0, rel=0.05)


def _conjugate(seed=3, n=20, sigma=1.0, prior_sd=10.0):
    y = np.random.default_rng(seed).normal(2.0, sigma, n)

    def log_density(u):
        mu = u[..., 0:1]
        return (-0.5 * np.sum((y - mu) ** 2, axis=-1) / sigma**2
                - 0.5 * u[..., 0] ** 2 / prior_sd**2)

    post_var = 1.0 / (n / sigma**2 + 1.0 / prior_sd**2)
    post_mean = post_var * y.sum() / sigma**2
    target = DensityTarget(log_density, dim=1, names=["mu"],
                           pointwise_loglik=lambda u: -0.5 * (y - u[..., 0:1]) ** 2 - 0.5 * math.log(2 * math.pi))
    return target, post_mean, math.sqrt(post_var)


def test_conjugate_normal_mean():
    target, mean, sd = _conjugate()
    cfg = McmcConfig(n_chains=4, n_iters=5000, n_warmup=1000, seed=4)
    draws = sample(target, cfg, init="prior-draw")
    x = draws.param("mu")
    err = mcse(x)
    assert abs(x.mean() - mean) < 3 * err
    # the SD of the sample SD is roughly sd / sqrt(2 ESS)
    assert abs(x.std() - sd) < 3 * sd / math.sqrt(2 * effective_sample_size(x))
    assert draws.loglik.shape == (4, 4000, 20)
    assert split_rhat(x) < 1.01


def test_same_seed_is_bit_identical():
    target, _, _ = _conjugate()
    cfg = McmcConfig(n_chains=3, n_iters=400, n_warmup=200, seed=99)
    a = sample(target, cfg, init="prior-draw")
    b = sample(target, cfg, init="prior-draw")
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.loglik, b.loglik)
    c = sample(target, McmcConfig(n_chains=3, n_iters=400, n_warmup=200, seed=100), init="prior-draw")
    assert not np.array_equal(a.draws, c.draws)


def test_ks_on_correlated_gaussian():
    cov = np.array([[1.0, 0.8], [0.8, 2.0]])
    prec = np.linalg.inv(cov)
    target = DensityTarget(lambda u: -0.5 * np.einsum("...i,ij,...j->...", u, prec, u), dim=2)
    # thinning leaves near-independent draws, which the KS null assumes
    cfg = McmcConfig(n_chains=4, n_iters=1000 + 5000 * 10, n_warmup=1000, thin=10, seed=5)
    x = sample(target, cfg, init="prior-draw").draws.reshape(-1, 2)
    assert x.shape[0] == 20_000
    for k in range(2):
        p = stats.kstest(x[:, k], "norm", args=(0, math.sqrt(cov[k, k]))).pvalue
        assert p > 0.01


def test_adaptation_frozen_after_warmup():
    target, _, _ = _conjugate()
    cfg = McmcConfig(n_chains=2, n_iters=600, n_warmup=300, seed=6)
    draws = sample(target, cfg, init="prior-draw")
    for name, snap in draws.adaptation.items():
        warm = draws.warmup_adaptation[name]
        for key in snap:
            assert np.array_equal(snap[key], warm[key])


@pytest.fixture(scope="module")
def scenario1_fit():
    data, _ = gen_dataset(ScenarioConfig.scenario(1, n_subjects=50), 0)
    cfg = McmcConfig.desk(seed=7)
    return data, run_chains("dem", data, PriorConfig(), cfg)


def test_hierarchical_fit_kernel_is_frozen(scenario1_fit):
    _, draws = scenario1_fit
    for name, snap in draws.adaptation.items():
        for key in snap:
            assert np.array_equal(snap[key], draws.warmup_adaptation[name][key])
    assert np.all(np.isfinite(draws.draws)) and np.all(np.isfinite(draws.loglik))


def test_acceptance_rates_reported(scenario1_fit):
    _, draws = scenario1_fit
    for name, rates in draws.acceptance.items():
        assert np.all((rates >= 0) & (rates <= 1))
        if not np.all((rates >= 0.1) & (rates <= 0.6)):
            warnings.warn(f"block {name}: acceptance {np.round(rates, 3)} outside [0.1, 0.6]")


def test_initialization_policies():
    data, _ = gen_dataset(ScenarioConfig.scenario(1, n_subjects=20), 0)
    rng = np.random.default_rng(8)
    hm = HierarchicalModel("dem", data)
    st = initialize("data-informed", hm, rng=rng)
    assert 0 <= st.fixed.beta_cp <= 20
    assert np.all(st.random_effects == 0)
    for _ in range(20):
        assert 0 < initialize("prior-draw", "dem", data, rng=rng).fixed.beta_cp < 20
    # zero random effects contribute sum normal-logpdf(0; 0, omega) exactly
    omegas = st.variances.as_array()[1:]
    expected = data.n_subjects * float(np.sum(_normal_logpdf(0.0, 0.0, omegas)))
    got = float(np.sum(_normal_logpdf(st.random_effects, 0.0, omegas)))
    assert got == expected
    with pytest.raises(ValueError):
        initialize("random", hm, rng=rng)


def test_initialization_failure():
    target = DensityTarget(lambda u: np.full(u.shape[:-1], -np.inf), dim=2)
    with pytest.raises(InitializationError):
        sample(target, McmcConfig(n_chains=2, n_iters=10, n_warmup=5), init="prior-draw")


def test_nan_proposals_are_counted_and_rejected():
    def log_density(u):
        x = u[..., 0]
        return np.where(x > 1.0, np.nan, -0.5 * x * x)

    target = DensityTarget(log_density, dim=1, init=lambda rng: np.array([0.0]))
    draws = sample(target, McmcConfig(n_chains=2, n_iters=2000, n_warmup=500, seed=9), init="prior-draw")
    assert draws.divergences.sum() > 0
    assert np.all(draws.draws <= 1.0)


def test_config_invariants():
    with pytest.raises(ValueError):
        McmcConfig(n_chains=1)
    with pytest.raises(ValueError):
        McmcConfig(n_iters=100, n_warmup=100)
    cfg = McmcConfig.desk(seed=3)
    assert (cfg.n_iters, cfg.n_warmup) == (1500, 750)
    assert McmcConfig.from_dict(cfg.to_dict()) == cfg


def test_draws_csv_round_trip(tmp_path):
    target, _, _ = _conjugate()
    draws = sample(target, McmcConfig(n_chains=2, n_iters=100, n_warmup=50, seed=10), init="prior-draw")
    paths = draws.to_csv(tmp_path)
    assert [p.name for p in paths] == ["chain_0.csv", "chain_1.csv"]
    assert paths[0].read_text().splitlines()[0] == "mu"
    back = PosteriorDraws.from_csv(tmp_path)
    assert np.array_equal(back.draws, draws.draws)
