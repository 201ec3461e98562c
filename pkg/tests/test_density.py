import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bottomup.density import (
    FIXED,
    RANDOM,
    ClusterData,
    ModelError,
    ModelLayout,
    cluster_sd,
    linear_predictor,
    log_likelihood,
    log_prior,
    pooled_sd,
    poisson_logpmf,
    resolve_effect_modes,
)
from bottomup.mcmc import PosteriorDraws
from bottomup.posterior import DensityPosterior

from conftest import make_cluster, random_clusters
from oracles import brute_force_log_likelihood, brute_force_log_prior, random_state


def layout_for(clusters, modes=(RANDOM, FIXED)):
    k = len(clusters[0].covariates)
    return ModelLayout.from_clusters(clusters, [f"cov_{i + 1}" for i in range(k)], list(modes)[:k])


def single_cell_state(alpha, beta, mode=FIXED):
    c = make_cluster(covariates=(0.0,), weight=1.0, model_weight=1.0)
    L = ModelLayout.from_clusters([c], ["x"], [mode])
    p = random_state(L, np.random.default_rng(0))
    p.alpha[:] = alpha
    if mode == FIXED:
        p.beta_fixed[:] = beta
    else:
        p.beta_random[:] = beta
    return p


# ---------------------------------------------------------------- linear predictor


@pytest.mark.parametrize("mode", [FIXED, RANDOM])
def test_predictor_substitution(mode):
    p = single_cell_state(1.0, 0.5, mode)
    c = make_cluster(covariates=(2.0,))
    assert linear_predictor(p, c) == pytest.approx(2.0)
    assert math.exp(linear_predictor(p, c)) == pytest.approx(7.389056, rel=1e-6)


def test_zero_slopes_and_zero_covariates_give_intercept():
    assert linear_predictor(single_cell_state(1.3, 0.0), make_cluster(covariates=(5.0,))) == pytest.approx(1.3)
    assert linear_predictor(single_cell_state(1.3, 4.0), make_cluster(covariates=(0.0,))) == pytest.approx(1.3)


def test_unknown_hierarchy_cell():
    with pytest.raises(ModelError):
        linear_predictor(single_cell_state(1.0, 0.5), make_cluster(region=9))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 2))
def test_predictor_affine(alpha, beta, x, h):
    p = single_cell_state(alpha, beta)
    f0 = linear_predictor(p, make_cluster(covariates=(x,)))
    f1 = linear_predictor(p, make_cluster(covariates=(x + h,)))
    assert (f1 - f0) / h == pytest.approx(beta, abs=1e-10 / h + 1e-9)


# ---------------------------------------------------------------- scales


@pytest.mark.parametrize("v,tau,sd", [(1, 2, 0.5), (0.25, 2, 1.0), (1, 1, 1.0)])
def test_cluster_sd(v, tau, sd):
    assert cluster_sd(v, tau) == pytest.approx(sd)


@pytest.mark.parametrize("v,tau", [(0, 1), (1, 0), (-1, 1), (1, -2)])
def test_cluster_sd_rejects_nonpositive(v, tau):
    with pytest.raises(ModelError):
        cluster_sd(v, tau)


@given(st.floats(1e-6, 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cluster_sd_homogeneous(v, tau, c):
    assert cluster_sd(v, c * tau) == pytest.approx(cluster_sd(v, tau) / c, rel=1e-12)


def test_pooled_sd_cases():
    assert pooled_sd([1.0, 2.0, 6.0], [0.2, 0.2, 0.2]) == pytest.approx(3.0)
    assert pooled_sd([0.7], [0.3]) == pytest.approx(0.7)
    # weights 0.2 and 0.8: (3*sqrt(.2) + sqrt(.8)) / (sqrt(.2) + sqrt(.8)) = 5/3
    assert pooled_sd([3.0, 1.0], [0.2, 0.8]) == pytest.approx(5 / 3, abs=1e-14)
    with pytest.raises(ModelError):
        pooled_sd([], [])


@given(st.lists(st.tuples(st.floats(1e-3, 1e3), st.floats(1e-6, 1)), min_size=1, max_size=40))
def test_pooled_sd_within_bounds(pairs):
    sds, v = zip(*pairs)
    out = pooled_sd(sds, v)
    assert min(sds) * (1 - 1e-12) <= out <= max(sds) * (1 + 1e-12)


# ---------------------------------------------------------------- likelihood and prior


def test_poisson_terms():
    assert poisson_logpmf(0, 1.0) == pytest.approx(-1.0)
    assert poisson_logpmf(30, 10.0 * 3.0) == pytest.approx(-2.6223148989654987, abs=1e-12)
    assert poisson_logpmf(30, 30.0) == pytest.approx(stats.poisson.logpmf(30, 30), abs=1e-12)


def test_lognormal_term_at_mode_of_log_residual():
    c = make_cluster(population=0, area=1e-300, covariates=(0.0,), weight=1.0, model_weight=1.0)
    L = ModelLayout.from_clusters([c], ["x"], [FIXED])
    p = random_state(L, np.random.default_rng(1))
    p.density[:] = math.exp(p.alpha[0])
    data = ClusterData.build(L, [c])
    tau = p.tau_tp[0]
    d = p.density[0]
    assert log_likelihood(p, data) == pytest.approx(-math.log(d * (1 / tau) * math.sqrt(2 * math.pi)), abs=1e-10)


def test_nonpositive_density_rejected(rng):
    clusters = random_clusters(rng, 10)
    L = layout_for(clusters)
    p = random_state(L, rng)
    p.density[3] = 0.0
    assert log_likelihood(p, ClusterData.build(L, clusters)) == -math.inf


@pytest.mark.parametrize("seed", range(5))
def test_joint_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    clusters = random_clusters(rng, 30, k=2)
    L = layout_for(clusters)
    p = random_state(L, rng)
    data = ClusterData.build(L, clusters)
    assert log_likelihood(p, data) == pytest.approx(brute_force_log_likelihood(p, clusters), abs=1e-8)
    assert log_prior(p) == pytest.approx(brute_force_log_prior(p), abs=1e-8)


def test_prior_at_prior_means_is_finite_and_matches(rng):
    clusters = random_clusters(rng, 12, k=1)
    L = layout_for(clusters, (RANDOM,))
    p = random_state(L, rng)
    p.xi_t[:] = 0.0
    p.mu_t[:] = 0.0
    p.rho[:] = 0.0
    p.xi_tp[:] = p.xi_t[L.type_of_stratum]
    p.alpha[:] = p.xi_tp[L.stratum_of_alpha]
    p.mu_tp[:] = 0.5
    p.tau_tp[:] = p.mu_tp
    p.beta_random[:] = 0.0
    value = log_prior(p)
    assert math.isfinite(value)
    assert value == pytest.approx(brute_force_log_prior(p), abs=1e-10)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda p: p.nu_tp.__setitem__(0, p.nu_t[p.layout.type_of_stratum[0]] + 0.1),
        lambda p: p.tau_tp.__setitem__(0, -0.1),
        lambda p: p.sigma_tp.__setitem__(0, p.sigma_t[p.layout.type_of_stratum[0]] * 1.01),
        lambda p: p.nu_t.__setitem__(0, 1001.0),
        lambda p: p.omega.__setitem__(0, 0.0),
        lambda p: p.mu_tp.__setitem__(0, -1.0),
    ],
)
def test_outside_support_is_minus_infinity(rng, mutate):
    clusters = random_clusters(rng, 12, k=1)
    p = random_state(layout_for(clusters, (RANDOM,)), rng)
    mutate(p)
    assert log_prior(p) == -math.inf


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_exposure_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    clusters = random_clusters(rng, 8, k=1)
    L = layout_for(clusters, (FIXED,))
    p = random_state(L, rng)
    data = ClusterData.build(L, clusters)
    scaled = [replace(c, footprint_area=c.footprint_area * factor) for c in clusters]
    base = poisson_logpmf(data.population, p.density * data.area)
    moved = poisson_logpmf(data.population, p.density / factor * ClusterData.build(L, scaled).area)
    np.testing.assert_allclose(moved, base, rtol=1e-12, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_joint_finite_inside_support(seed):
    rng = np.random.default_rng(seed)
    clusters = random_clusters(rng, 10, k=2)
    p = random_state(layout_for(clusters), rng)
    assert math.isfinite(log_likelihood(p, ClusterData.build(p.layout, clusters)) + log_prior(p))


# ---------------------------------------------------------------- blocked conditionals


@pytest.mark.parametrize("seed", range(3))
def test_block_conditionals_agree_with_joint(seed):
    rng = np.random.default_rng(seed)
    clusters = random_clusters(rng, 24, k=2)
    L = layout_for(clusters)
    target = DensityPosterior(L, ClusterData.build(L, clusters))
    state = random_state(L, rng).to_vector()
    for block in target.blocks:
        for pos in block.index:
            moved = state.copy()
            moved[pos] += 0.05 * (1 if block.positive else rng.choice([-1, 1]))
            delta_joint = target.log_posterior(moved) - target.log_posterior(state)
            delta_block = np.sum(block.logdens(moved)) - np.sum(block.logdens(state))
            assert delta_block == pytest.approx(delta_joint, abs=1e-8), (block.name, pos)


# ---------------------------------------------------------------- effect modes


def fake_pilot(layout, urban, rural, n=400):
    names = layout.names()
    samples = np.zeros((1, n, len(names)))
    samples[0, :, names.index("beta[x:urban]")] = urban
    samples[0, :, names.index("beta[x:rural]")] = rural
    return PosteriorDraws.from_samples(names, samples)


def two_type_layout():
    cl = [make_cluster("a", covariates=(0.0,), model_weight=0.5), make_cluster("b", stype="rural", covariates=(0.0,), model_weight=0.5)]
    return ModelLayout.from_clusters(cl, ["x"], [RANDOM])


def test_identical_slopes_become_fixed(rng):
    L = two_type_layout()
    draws = rng.normal(0.3, 0.1, 400)
    assert resolve_effect_modes(fake_pilot(L, draws, draws), L) == [FIXED]


def test_disjoint_slopes_stay_random(rng):
    L = two_type_layout()
    assert resolve_effect_modes(fake_pilot(L, rng.uniform(0.5, 0.9, 400), rng.uniform(-0.9, -0.5, 400)), L) == [RANDOM]


def test_short_pilot_rejected(rng):
    L = two_type_layout()
    with pytest.raises(ModelError, match="100"):
        resolve_effect_modes(fake_pilot(L, np.zeros(50), np.zeros(50), n=50), L)
