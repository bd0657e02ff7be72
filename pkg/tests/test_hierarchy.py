import math

import numpy as np
import pytest

from cpnlmm.hierarchy import (
    DatasetError,
    FixedEffects,
    HalfCauchy,
    HierarchicalModel,
    LongitudinalDataset,
    Normal,
    ParamState,
    PriorConfig,
    Subject,
    Uniform,
    VarianceComponents,
    individual_params,
    log_likelihood_subject,
    log_posterior,
    log_prior,
    per_observation_loglik,
)
from cpnlmm.trajectories import ThetaIndividual, mean_fn

from .oracles import half_cauchy_logpdf, normal_logpdf

KINDS = ["bsm", "bwm", "bcr", "dem"]


def toy_data(rng, n_subjects=5, ragged=True):
    ids, times, ys = [], [], []
    for i in range(n_subjects):
        k = int(rng.integers(3, 8)) if ragged else 6
        t = np.sort(rng.uniform(0, 20, k))
        ids += [f"s{i}"] * k
        times += list(t)
        ys += list(10 + rng.normal(0, 1, k))
    return LongitudinalDataset.from_arrays(ids, times, ys)


def random_state(rng, n_subjects, priors=PriorConfig()):
    fixed = FixedEffects(rng.uniform(8, 12), 0.0, rng.uniform(0.05, 0.5),
                         rng.uniform(2, 18), rng.uniform(0.5, 4.5))
    sd = VarianceComponents(*rng.uniform(0.2, 1.5, 4))
    re = rng.normal(0, 1, (n_subjects, 3)) * sd.as_array()[1:]
    return ParamState(fixed, sd, re)


# -- individual parameters ----------------------------------------------------


def test_individual_params_examples():
    fixed = FixedEffects(11.0, 0.0, 0.5, 10.0, 3.0)
    assert individual_params(fixed, (0.3, 0.0, 0.0)).theta0 == pytest.approx(11.3)
    th = individual_params(fixed, (0.0, 0.0, 0.0))
    assert (th.theta0, th.theta1, th.theta2, th.theta_cp, th.theta_t) == (11.0, 0.0, 0.5, 10.0, 3.0)
    assert individual_params(fixed, (0.0, 0.0, -2.0)).theta_cp == 8.0


# -- likelihood -----------------------------------------------------------------


def test_single_observation_loglik():
    th = ThetaIndividual(11.0, 0.0, 0.5, 10.0, 3.0)
    f = float(mean_fn("dem", 12.0, th))
    s = Subject("a", np.array([12.0]), np.array([f]))
    assert log_likelihood_subject("dem", s, th, 1.0) == pytest.approx(-0.91894, abs=1e-5)
    assert log_likelihood_subject("dem", s, th, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
    s1 = Subject("a", np.array([12.0]), np.array([f + 1]))
    assert log_likelihood_subject("dem", s1, th, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_subject_loglik_matches_scalar_oracle(kind):
    rng = np.random.default_rng(11)
    for _ in range(20):
        th = ThetaIndividual(rng.uniform(8, 12), 0.0, rng.uniform(0.05, 0.5), rng.uniform(2, 18), rng.uniform(1, 5))
        t = np.sort(rng.uniform(0, 20, 7))
        y = rng.normal(8, 2, 7)
        sigma = rng.uniform(0.3, 2)
        expected = sum(normal_logpdf(yj, float(mean_fn(kind, tj, th)), sigma) for tj, yj in zip(t, y))
        got = log_likelihood_subject(kind, Subject("x", t, y), th, sigma)
        assert got == pytest.approx(expected, abs=1e-12 * max(1, abs(expected)))


# -- prior ------------------------------------------------------------------------


def test_log_prior_out_of_support():
    rng = np.random.default_rng(1)
    state = random_state(rng, 3)
    bad = ParamState(FixedEffects(10, 0, 0.2, 25.0, 2.0), state.variances, state.random_effects)
    assert log_prior(bad, PriorConfig()) == -math.inf


def test_half_cauchy_at_origin():
    assert HalfCauchy(0.0, 10.0).logpdf(0.0) == pytest.approx(math.log(2 / (math.pi * 10)), abs=1e-14)
    assert HalfCauchy(0.0, 10.0).logpdf(1e-12) == pytest.approx(-2.7541, abs=1e-4)
    assert HalfCauchy(0.0, 10.0).logpdf(-1.0) == -math.inf


@pytest.mark.parametrize("kind", KINDS)
def test_log_prior_term_by_term(kind):
    rng = np.random.default_rng(12)
    p = PriorConfig()
    for _ in range(10):
        state = random_state(rng, 4)
        f, v = state.fixed, state.variances
        expected = normal_logpdf(f.beta0, 10, 10) + normal_logpdf(f.beta2, 0, 10) - math.log(20.0)
        if kind != "bsm":
            expected += -math.log(5.0)
        expected += half_cauchy_logpdf(v.sigma_eps, 10) + half_cauchy_logpdf(v.omega0, 1)
        expected += half_cauchy_logpdf(v.omega2, 1) + half_cauchy_logpdf(v.omega_cp, 1)
        for row in state.random_effects:
            for eta, omega in zip(row, (v.omega0, v.omega2, v.omega_cp)):
                expected += normal_logpdf(eta, 0.0, omega)
        assert log_prior(state, p, kind) == pytest.approx(expected, abs=1e-12 * abs(expected))


# -- posterior ---------------------------------------------------------------------


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        LongitudinalDataset([])


@pytest.mark.parametrize("kind", KINDS)
def test_factorization(kind):
    rng = np.random.default_rng(13)
    data = toy_data(rng)
    p = PriorConfig()
    hm = HierarchicalModel(kind, data, p)
    for _ in range(5):
        state = random_state(rng, data.n_subjects)
        u = hm.from_state(state)
        lp = log_posterior(kind, data, state, p)
        ll = per_observation_loglik(kind, data, state, p)
        rest = lp - log_prior(state, p, kind) - float(hm.log_jacobian(u))
        assert rest == pytest.approx(np.nansum(ll), rel=1e-12, abs=1e-10)
        subj = sum(log_likelihood_subject(kind, s, individual_params(state.fixed, re), state.variances.sigma_eps)
                   for s, re in zip(data.subjects, state.random_effects))
        assert np.nansum(ll) == pytest.approx(subj, rel=1e-12)


def test_per_observation_matrix():
    rng = np.random.default_rng(14)
    data = toy_data(rng)
    state = random_state(rng, data.n_subjects)
    ll = per_observation_loglik("bcr", data, state)
    for i, s in enumerate(data.subjects):
        th = individual_params(state.fixed, state.random_effects[i])
        for j, (t, y) in enumerate(zip(s.times, s.outcomes)):
            assert ll[i, j] == pytest.approx(
                normal_logpdf(y, float(mean_fn("bcr", t, th)), state.variances.sigma_eps), abs=1e-12)
        assert np.all(np.isnan(ll[i, s.n_obs:]))
    # a lone single-observation subject violates the dataset invariant, so
    # the smallest matrix is one subject with two observations
    with pytest.raises(DatasetError):
        LongitudinalDataset.from_arrays(["a"], [3.0], [10.0])
    one = LongitudinalDataset.from_arrays(["a", "a"], [3.0, 4.0], [10.0, 9.0])
    assert per_observation_loglik("dem", one, random_state(rng, 1)).shape == (1, 2)


def test_locality_of_random_effects():
    rng = np.random.default_rng(15)
    data = toy_data(rng, n_subjects=4)
    p = PriorConfig()
    state = random_state(rng, 4)
    base = per_observation_loglik("dem", data, state, p)
    re = state.random_effects.copy()
    delta = 0.37
    re[2, 0] += delta
    moved = state.with_random_effects(re)
    after = per_observation_loglik("dem", data, moved, p)
    changed = ~np.isclose(np.nan_to_num(base), np.nan_to_num(after), rtol=0, atol=0)
    assert changed[2].any() and not changed[[0, 1, 3]].any()
    diff = log_posterior("dem", data, moved, p) - log_posterior("dem", data, state, p)
    omega0 = state.variances.omega0
    expected = (np.nansum(after[2]) - np.nansum(base[2])
                + normal_logpdf(re[2, 0], 0, omega0) - normal_logpdf(re[2, 0] - delta, 0, omega0))
    # the Jacobian does not involve eta, so only these two terms move
    assert diff == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("kind", KINDS)
def test_support(kind):
    rng = np.random.default_rng(16)
    data = toy_data(rng, n_subjects=3)
    p = PriorConfig()
    state = random_state(rng, 3)
    assert np.isfinite(log_posterior(kind, data, state, p))
    f = state.fixed
    for cp in (0.0, 20.0, -1.0, 21.0):
        s = ParamState(FixedEffects(f.beta0, 0.0, f.beta2, cp, f.theta_t), state.variances, state.random_effects)
        assert log_posterior(kind, data, s, p) == -math.inf
    if kind != "bsm":
        for width in (0.0, 5.0, 6.0):
            s = ParamState(FixedEffects(f.beta0, 0.0, f.beta2, f.beta_cp, width), state.variances,
                           state.random_effects)
            assert log_posterior(kind, data, s, p) == -math.inf
    s = ParamState(f, VarianceComponents(0.0, 1, 1, 1), state.random_effects)
    assert log_posterior(kind, data, s, p) == -math.inf


# -- transforms ------------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_transform_round_trip(kind):
    rng = np.random.default_rng(17)
    data = toy_data(rng, n_subjects=3)
    hm = HierarchicalModel(kind, data)
    u = rng.normal(0, 2, (1000, hm.dim))
    for row in u:
        back = hm.from_state(hm.to_state(row))
        np.testing.assert_allclose(back, row, rtol=0, atol=1e-12 * max(1, np.abs(row).max()))
    assert np.all(np.isfinite(hm.log_jacobian(u)))


def test_uniform_transform_round_trip():
    prior = Uniform(2.0, 7.0)
    x = np.linspace(2.001, 6.999, 101)
    np.testing.assert_allclose(prior.from_unconstrained(prior.to_unconstrained(x)), x, atol=1e-12)


def test_log_jacobian_against_finite_differences():
    rng = np.random.default_rng(18)
    data = toy_data(rng, n_subjects=2)
    hm = HierarchicalModel("dem", data)
    u = rng.normal(0, 0.5, hm.dim)
    h = 1e-6
    jac = np.empty((hm.dim, hm.dim))
    for k in range(hm.dim):
        e = np.zeros(hm.dim)
        e[k] = h
        jac[:, k] = (hm.constrain(u + e) - hm.constrain(u - e)) / (2 * h)
    assert hm.log_jacobian(u) == pytest.approx(np.linalg.slogdet(jac)[1], abs=1e-6)


def test_richardson_ratio():
    rng = np.random.default_rng(19)
    data = toy_data(rng, n_subjects=3)
    hm = HierarchicalModel("dem", data)
    ratios = []
    for _ in range(20):
        u = hm.from_state(random_state(rng, 3))
        k = int(rng.integers(hm.dim))
        e = np.zeros(hm.dim)
        e[k] = 1.0

        def d(h):
            return (hm.log_density(u + h * e) - hm.log_density(u - h * e)) / (2 * h)

        # at the nominal step the estimates agree to rounding level
        assert abs(d(1e-5) - d(5e-6)) < 1e-5 * max(1.0, abs(d(1e-5)))
        # truncation-dominated steps expose the h^2 error: successive
        # differences shrink by four when the step is halved
        h = 0.05
        a, b, c = d(h), d(h / 2), d(h / 4)
        if abs(b - c) > 1e-9:
            ratios.append((a - b) / (b - c))
    assert len(ratios) >= 15
    assert np.median(ratios) == pytest.approx(4.0, abs=0.3)


# -- configuration --------------------------------------------------------------------


def test_prior_config_round_trip_and_validation():
    p = PriorConfig(free_beta1=True)
    assert PriorConfig.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        Uniform(3.0, 3.0)
    with pytest.raises(ValueError):
        HalfCauchy(0.0, 0.0)
    assert Normal(0, 1).logpdf(0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_free_beta1_adds_parameter():
    rng = np.random.default_rng(20)
    data = toy_data(rng, n_subjects=2)
    assert "beta1" not in HierarchicalModel("dem", data).fixed_names
    hm = HierarchicalModel("dem", data, PriorConfig(free_beta1=True))
    assert "beta1" in hm.fixed_names
    assert hm.dim == HierarchicalModel("dem", data).dim + 1


def test_dataset_from_arrays_sorts_and_groups():
    data = LongitudinalDataset.from_arrays(["b", "a", "b", "a"], [3.0, 2.0, 1.0, 5.0], [1, 2, 3, 4])
    assert data.ids == ["b", "a"]
    np.testing.assert_array_equal(data.subjects[0].times, [1.0, 3.0])
    assert data.n_obs == 4
    assert data.shift_time(1.0).time_range() == (0.0, 4.0)
