import numpy as np
import pytest

from bottomup.data import compute_model_weights, prepare_clusters
from bottomup.density import FIXED, RANDOM, ModelError
from bottomup.mcmc import ChainConfig
from bottomup.posterior import fit_density
from bottomup.synthetic import WorldConfig, gen_world, recovery_report

from conftest import make_cluster

CFG = ChainConfig(n_chains=2, n_iterations=2000, seed=1)


@pytest.fixture(scope="module")
def small_fit():
    world, survey = gen_world(WorldConfig(nrows=30, ncols=40, n_clusters=150, regions_per_province=2, log_sd_range=(0.3, 0.3)), 11)
    clusters, _ = prepare_clusters(survey.clusters)
    return world, fit_density(clusters, world.covariate_names, [RANDOM, RANDOM], CFG)


def test_draws_shape_and_names(small_fit):
    world, fit = small_fit
    assert fit.draws.samples.shape == (2, 1000, fit.layout.size)
    assert "alpha[urban:1:1]" in fit.draws.names
    assert "beta[cov_1:rural]" in fit.draws.names
    assert np.isfinite(fit.draws.log_posterior).all()


def test_parameters_recovered(small_fit):
    world, fit = small_fit
    report = recovery_report(world, fit.layout, fit.draws)
    by_kind = report.coverage_by_kind()
    assert by_kind["alpha"] >= 0.75
    assert by_kind["beta"] >= 0.75
    for row in report.rows:
        if row.kind == "beta":
            assert abs(row.mean - row.true) < 0.25


def test_core_parameters_converge(small_fit):
    _, fit = small_fit
    names = fit.draws.names
    rhat = fit.rhat()
    core = [i for i, n in enumerate(names) if n.startswith(("alpha", "beta", "tau"))]
    assert np.all(rhat[core] < 1.1)


def hand_clusters(urban_slope, rural_slope, n=160, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        stype = "urban" if i % 2 else "rural"
        x = rng.standard_normal()
        slope = urban_slope if stype == "urban" else rural_slope
        d = np.exp(3.0 + slope * x + 0.2 * rng.standard_normal())
        area = rng.uniform(1, 5)
        out.append(make_cluster(f"c{i}", 1, 1, stype, int(rng.poisson(d * area)), area, (x,)))
    return compute_model_weights(out)


def test_auto_modes_keep_distinct_slopes_random():
    fit = fit_density(hand_clusters(0.8, -0.8), ["x"], "auto", ChainConfig(n_chains=2, n_iterations=800, seed=0))
    assert fit.pilot_modes == [RANDOM]
    assert fit.layout.modes == [RANDOM]


def test_auto_modes_merge_shared_slopes():
    fit = fit_density(hand_clusters(0.5, 0.5), ["x"], "auto", ChainConfig(n_chains=2, n_iterations=800, seed=0))
    assert fit.layout.modes == [FIXED]
    assert "beta[x]" in fit.draws.names


def test_fit_reproducible():
    clusters = hand_clusters(0.5, 0.5, n=40)
    cfg = ChainConfig(n_chains=2, n_iterations=200, seed=4)
    a = fit_density(clusters, ["x"], [FIXED], cfg)
    b = fit_density(clusters, ["x"], [FIXED], cfg)
    assert a.draws.samples.tobytes() == b.draws.samples.tobytes()


def test_bad_modes_rejected():
    with pytest.raises(ValueError):
        fit_density(hand_clusters(0, 0, n=10), ["x"], "sometimes", CFG)
    with pytest.raises(ModelError):
        fit_density(hand_clusters(0, 0, n=10), ["x"], ["mixed"], CFG)
