import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bottomup.agesex import N_GROUPS, ProportionDraws
from bottomup.ascgrid import GridHeader, read_asc
from bottomup.data import GridStack
from bottomup.density import FIXED, ModelError, ModelLayout
from bottomup.mcmc import PosteriorDraws
from bottomup.predict import (
    aggregate_zones,
    disaggregate_agesex,
    group_draws,
    predict_cell_draw,
    predict_clusters,
    predict_grid,
    select_draws,
    tau_hat,
    write_grid_outputs,
)

from conftest import make_cluster
from oracles import random_state


def one_stratum_model(alpha, tau, beta=0.0):
    """Layout with one urban cell (province 1, region 1) and one covariate."""
    c = make_cluster(covariates=(0.0,), model_weight=1.0)
    L = ModelLayout.from_clusters([c], ["x"], [FIXED])
    p = random_state(L, np.random.default_rng(0))
    p.alpha[:] = alpha
    p.tau_tp[:] = tau
    p.beta_fixed[:] = beta
    return L, p


def grid_of(area, stype=1.0, province=1.0, region=1.0, x=0.0):
    area = np.asarray(area, dtype=float)
    shape = area.shape
    h = GridHeader(shape[1], shape[0])
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), shape).copy()
    return GridStack(h, area, full(stype), full(province), full(region), {"x": full(x)})


def test_zero_area_predicts_zero():
    _, p = one_stratum_model(math.log(10), 2.0)
    assert predict_cell_draw(p, make_cluster(area=0.0, covariates=(0.0,)), np.random.default_rng(0)) == 0


def test_deterministic_density_gives_poisson_counts():
    L, p = one_stratum_model(math.log(10), 1e12)
    matrix = np.tile(p.to_vector(), (20_000, 1))
    draws = predict_clusters(L, matrix, [make_cluster(area=3.0, covariates=(0.0,))], seed=1)[:, 0]
    assert abs(draws.mean() - 30) < 3 * math.sqrt(30 / draws.size)
    assert draws.var() == pytest.approx(30, rel=0.05)


def test_single_draw_path_agrees_with_vectorised_path():
    L, p = one_stratum_model(math.log(5), 2.0, beta=0.3)
    cell = make_cluster(area=2.0, covariates=(1.0,))
    rng = np.random.default_rng(3)
    single = np.array([predict_cell_draw(p, cell, rng) for _ in range(20_000)])
    vector = predict_clusters(L, np.tile(p.to_vector(), (20_000, 1)), [cell], seed=3)[:, 0]
    expected = 2.0 * math.exp(math.log(5) + 0.3 + 0.5 * tau_hat(p)[0] ** 2)
    for draws in (single, vector):
        assert abs(draws.mean() - expected) < 4 * draws.std() / math.sqrt(draws.size)


def test_unseen_region_uses_hyper_distribution():
    L, p = one_stratum_model(3.0, 1e9)
    p.xi_tp[:] = 1.0
    p.nu_tp[:] = 1e-9
    cell = make_cluster(region=7, area=1.0, covariates=(0.0,))
    matrix = np.tile(p.to_vector(), (4000, 1))
    draws = predict_clusters(L, matrix, [cell], seed=2)[:, 0]
    assert abs(draws.mean() - math.e) < 4 * math.sqrt(math.e / draws.size)


def test_unknown_settlement_type():
    L, p = one_stratum_model(3.0, 2.0)
    with pytest.raises(ModelError):
        predict_clusters(L, p.to_vector()[None, :], [make_cluster(stype="rural", covariates=(0.0,))], 0)


def test_single_settled_cell_summaries():
    L, p = one_stratum_model(math.log(20), 2.0)
    area = np.zeros((2, 2))
    area[1, 0] = 2.0
    g = grid_of(area)
    pred = predict_grid(L, np.tile(p.to_vector(), (200, 1)), g, seed=4)
    s = pred.summaries()
    draws = pred.cell_draws[:, 0].astype(float)
    assert s["mean"][1, 0] == draws.mean()
    assert s["lo95"][1, 0] == np.quantile(draws, 0.025)
    assert s["hi95"][1, 0] == np.quantile(draws, 0.975)
    for key in s:
        assert np.isnan(s[key][0, 0]) and np.isnan(s[key][0, 1]) and np.isnan(s[key][1, 1])


def test_doubling_area_doubles_mean():
    L, p = one_stratum_model(math.log(20), 3.0)
    matrix = np.tile(p.to_vector(), (3000, 1))
    a = predict_grid(L, matrix, grid_of(np.full((4, 4), 1.5)), seed=1).cell_draws.sum(axis=1)
    b = predict_grid(L, matrix, grid_of(np.full((4, 4), 3.0)), seed=2).cell_draws.sum(axis=1)
    se = math.sqrt(a.var() / a.size * 4 + b.var() / b.size)
    assert abs(b.mean() - 2 * a.mean()) < 4 * se


def test_summaries_ordered_and_nonnegative():
    L, p = one_stratum_model(math.log(8), 1.5, beta=0.5)
    rng = np.random.default_rng(0)
    g = grid_of(rng.uniform(0.5, 3, (6, 7)), x=rng.standard_normal((6, 7)))
    s = predict_grid(L, np.tile(p.to_vector(), (300, 1)), g, seed=0).summaries()
    assert np.all(s["lo95"] <= s["median"]) and np.all(s["median"] <= s["hi95"])
    assert np.all(s["lo95"] >= 0)


def test_reruns_identical_and_independent_of_draw_container():
    L, p = one_stratum_model(math.log(8), 1.5, beta=0.5)
    rng = np.random.default_rng(0)
    g = grid_of(rng.uniform(0.5, 3, (40, 60)), x=rng.standard_normal((40, 60)))
    matrix = np.tile(p.to_vector(), (10, 1)) + rng.normal(0, 0.01, (10, L.size))
    a = predict_grid(L, matrix, g, seed=5).cell_draws
    b = predict_grid(L, matrix, g, seed=5).cell_draws
    assert a.tobytes() == b.tobytes()
    draws = PosteriorDraws.from_samples(L.names(), matrix[None])
    c = predict_grid(L, draws, g, n_pred_draws=None, seed=5).cell_draws
    assert a.tobytes() == c.tobytes()
    assert not np.array_equal(a, predict_grid(L, matrix, g, seed=6).cell_draws)


def test_select_draws_evenly_spaced():
    d = PosteriorDraws.from_samples(["a"], np.arange(20.0).reshape(2, 10, 1))
    np.testing.assert_array_equal(select_draws(d, 3)[:, 0], [0, 10, 19])
    assert select_draws(d, 100).shape == (20, 1)


def test_grid_missing_covariate_layer():
    L, p = one_stratum_model(1.0, 1.0)
    g = grid_of(np.ones((2, 2)))
    g.covariates = {"other": g.covariates["x"]}
    with pytest.raises(ModelError, match="x"):
        predict_grid(L, p.to_vector()[None], g)


# ---------------------------------------------------------------- age and sex


def pi_draws(n_draws, provinces, weights):
    w = np.asarray(weights, dtype=float)
    return ProportionDraws(list(provinces), np.tile(w / w.sum(), (n_draws, len(provinces), 1)))


def test_uniform_split():
    cells = np.array([[36, 72], [0, 360]])
    out = disaggregate_agesex(cells, np.array([1, 1]), pi_draws(2, [1], np.ones(N_GROUPS)))
    np.testing.assert_allclose(out["mean"], np.tile(cells.mean(axis=0) / 36, (N_GROUPS, 1)))


def test_point_mass_split():
    w = np.zeros(N_GROUPS)
    w[5] = 1.0
    cells = np.array([[10, 20]])
    out = disaggregate_agesex(cells, np.array([2, 2]), pi_draws(1, [2], w))
    np.testing.assert_array_equal(out["mean"][5], [10, 20])
    assert out["mean"].sum() == 30


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_groups_sum_to_totals_per_draw(seed):
    rng = np.random.default_rng(seed)
    cells = rng.poisson(50, (20, 9))
    provinces = rng.integers(1, 4, 9)
    g = rng.dirichlet(np.ones(N_GROUPS), (20, 3))
    pi = ProportionDraws([1, 2, 3], g)
    total = sum(group_draws(cells, provinces, pi, k) for k in range(N_GROUPS))
    np.testing.assert_allclose(total, cells, rtol=1e-12, atol=1e-9)


def test_missing_province_and_draw_mismatch():
    with pytest.raises(ValueError, match="province"):
        group_draws(np.ones((2, 1)), np.array([9]), pi_draws(2, [1], np.ones(N_GROUPS)), 0)
    with pytest.raises(ValueError, match="draws"):
        group_draws(np.ones((3, 1)), np.array([1]), pi_draws(2, [1], np.ones(N_GROUPS)), 0)


# ---------------------------------------------------------------- zones


def test_single_cell_zone_matches_cell(rng):
    draws = rng.poisson(30, (500, 3))
    z = aggregate_zones(draws, [1, 2, 2])[1]
    assert z["mean"] == draws[:, 0].mean()
    assert (z["lo95"], z["hi95"]) == tuple(np.quantile(draws[:, 0], [0.025, 0.975]))


def test_zone_of_independent_cells(rng):
    draws = rng.poisson([30, 80], (4000, 2))
    z = aggregate_zones(draws, [1, 1])[1]
    assert z["mean"] == pytest.approx(draws.mean(axis=0).sum(), rel=1e-12)
    widths = np.diff(np.quantile(draws, [0.025, 0.975], axis=0), axis=0).ravel()
    assert z["hi95"] - z["lo95"] <= widths.sum()


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_zone_means_additive_over_partitions(seed, n_zones):
    rng = np.random.default_rng(seed)
    draws = rng.poisson(40, (50, 30))
    zones = rng.integers(0, n_zones, 30)
    table = aggregate_zones(draws, zones)
    whole = aggregate_zones(draws, np.zeros(30))[0]["mean"]
    assert sum(row["mean"] for row in table.values()) == pytest.approx(whole, rel=1e-9)


def test_unzoned_cells_ignored():
    table = aggregate_zones(np.ones((4, 3)), [1, np.nan, 1])
    assert list(table) == [1] and table[1]["mean"] == 2


def test_outputs_written(tmp_path):
    L, p = one_stratum_model(math.log(8), 1.5)
    area = np.ones((3, 3))
    area[0, 0] = 0
    pred = predict_grid(L, np.tile(p.to_vector(), (5, 1)), grid_of(area), seed=0)
    zones = np.array([[1, 1, 1], [2, 2, 2], [2, 2, np.nan]])
    written = write_grid_outputs(tmp_path, pred, pi_draws(5, [1], np.ones(N_GROUPS)), zones)
    names = {w.name for w in written}
    assert {"pop_mean.asc", "pop_lo95.asc", "pop_hi95.asc", "zones.csv", "pop_male_lt1.asc", "pop_female_80plus.asc"} <= names
    header, mean = read_asc(tmp_path / "pop_mean.asc")
    assert np.isnan(mean[0, 0]) and header.matches(pred.header)
    lines = (tmp_path / "zones.csv").read_text().splitlines()
    assert lines[0] == "zone_id,mean,lo95,hi95" and len(lines) == 3
