"""Synthetic worlds with known truth for end-to-end validation.

A world is a raster of candidate cells split into provinces (column stripes)
and regions (row bands inside each province). Settled cells get a footprint
area, a settlement type and standard-normal covariates; true densities follow
the forward model ``log D = alpha[t,p,l] + x . beta[:, t] + s[t,p] * z`` and
cell populations are ``Poisson(D * A)``. A survey samples settled cells as
clusters, either uniformly or with probability proportional to population.

``log_sd_range`` sets the generating standard deviation of log density per
type x province stratum. The model's ``tau`` is a precision-type scale
(cluster sd ``1 / (tau * sqrt(v))``), so recovery compares on the sd scale.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .agesex import BAND_LOWER_EDGES, N_BANDS, N_GROUPS, SEXES, AgeSexTable, ProportionDraws, write_agesex_records
from .ascgrid import GridHeader
from .data import (
    SETTLEMENT_CODES,
    SETTLEMENT_TYPES,
    ClusterRecord,
    DataError,
    GridStack,
    save_grid,
    prepare_clusters,
    write_clusters,
)
from .density import RANDOM, ModelLayout
from .mcmc import ChainConfig, PosteriorDraws
from .posterior import fit_density
from .predict import predict_clusters, predict_grid, select_draws
from .stats import credible_interval

RANDOM_DESIGN = "random"
POP_WEIGHTED = "pop_weighted"


@dataclass(frozen=True)
class WorldConfig:
    nrows: int = 100
    ncols: int = 200
    cellsize: float = 250.0
    n_provinces: int = 2
    regions_per_province: int = 3
    n_covariates: int = 2
    n_clusters: int = 200
    design: str = RANDOM_DESIGN
    settled_fraction: float = 0.8
    urban_fraction: float = 0.3
    area_range: tuple = (1.0, 5.0)
    xi_range: tuple = (2.5, 4.5)
    region_sd: float = 0.3
    alpha_clip: tuple = (2.0, 5.0)
    beta_max: float = 0.6
    log_sd_range: tuple = (0.2, 1.0)
    beta_zero: bool = False
    pyramid_concentration: float = 200.0

    def __post_init__(self):
        if self.n_provinces < 1 or self.regions_per_province < 1:
            raise DataError("need at least one province and one region per province")
        if self.ncols < self.n_provinces:
            raise DataError("every province needs at least one grid column")
        if self.nrows < self.regions_per_province:
            raise DataError("regions must nest inside provinces: more regions than grid rows")
        if self.design not in (RANDOM_DESIGN, POP_WEIGHTED):
            raise DataError(f"unknown design {self.design!r}")
        lo, hi = self.log_sd_range
        if lo < 0 or hi < lo:
            raise DataError("log_sd_range must satisfy 0 <= lo <= hi")

    @property
    def covariate_names(self):
        return [f"cov_{k + 1}" for k in range(self.n_covariates)]


@dataclass
class TrueWorld:
    config: WorldConfig
    seed: int
    grid: GridStack  # covariates already standardised over settled cells
    alpha: dict  # (type, province, region) -> intercept
    beta: np.ndarray  # (K, T) slopes, columns in SETTLEMENT_TYPES order
    log_sd: dict  # (type, province) -> sd of log density
    true_density: np.ndarray  # raster, NaN outside settled cells
    true_population: np.ndarray  # raster of integers, 0 outside settled cells
    pi: dict  # province -> (G,) true age-sex proportions

    @property
    def total_population(self) -> int:
        return int(self.true_population.sum())

    @property
    def covariate_names(self):
        return self.config.covariate_names

    def settled_index(self):
        return np.flatnonzero(self.grid.settled_mask.ravel())


@dataclass
class Survey:
    clusters: list
    cell_index: np.ndarray
    agesex: AgeSexTable
    agesex_records: list = field(default_factory=list)
    design: str = RANDOM_DESIGN


def _pyramid():
    mid = np.array([0.5, 3.0] + [e + 2.5 for e in BAND_LOWER_EDGES[2:-1]] + [85.0])
    width = np.array([1.0, 4.0] + [5.0] * (N_BANDS - 3) + [10.0])
    band = width * np.exp(-0.035 * mid)
    band = np.concatenate([band, band * 1.02])
    return band / band.sum()


def gen_world(config: WorldConfig = WorldConfig(), seed: int = 0):
    """Generate a world and a survey of ``config.n_clusters`` clusters.

    Returns ``(world, survey)``; both are deterministic in ``(config, seed)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    c = config
    shape = (c.nrows, c.ncols)
    header = GridHeader(c.ncols, c.nrows, 0.0, 0.0, c.cellsize)
    col_province = 1 + (np.arange(c.ncols) * c.n_provinces) // c.ncols
    row_band = (np.arange(c.nrows) * c.regions_per_province) // c.nrows
    province = np.broadcast_to(col_province[None, :], shape).astype(float)
    region = ((province - 1) * c.regions_per_province + 1 + row_band[:, None]).astype(float)

    settled = rng.random(shape) < c.settled_fraction
    urban = rng.random(shape) < c.urban_fraction
    stype = np.where(settled, np.where(urban, SETTLEMENT_CODES["urban"], SETTLEMENT_CODES["rural"]), np.nan)
    area = np.where(settled, rng.uniform(*c.area_range, size=shape), 0.0)
    n_settled = int(settled.sum())
    if n_settled < 2:
        raise DataError("world has fewer than two settled cells")

    covariates = {}
    for name in c.covariate_names:
        vals = rng.standard_normal(n_settled)
        vals = (vals - vals.mean()) / vals.std(ddof=1)
        layer = np.full(shape, np.nan)
        layer[settled] = vals
        covariates[name] = layer
    grid = GridStack(header, area, stype, province, region, covariates)

    T = len(SETTLEMENT_TYPES)
    beta = np.zeros((c.n_covariates, T)) if c.beta_zero else rng.uniform(-c.beta_max, c.beta_max, (c.n_covariates, T))
    alpha, log_sd = {}, {}
    for t in SETTLEMENT_TYPES:
        for p in range(1, c.n_provinces + 1):
            xi = rng.uniform(*c.xi_range)
            log_sd[(t, p)] = float(rng.uniform(*c.log_sd_range))
            for j in range(c.regions_per_province):
                l = (p - 1) * c.regions_per_province + 1 + j
                alpha[(t, p, l)] = float(np.clip(xi + rng.normal(0, c.region_sd), *c.alpha_clip))

    flat = np.flatnonzero(settled.ravel())
    types = [SETTLEMENT_TYPES[int(k) - 1] for k in stype.ravel()[flat]]
    provs = province.ravel()[flat].astype(int)
    regs = region.ravel()[flat].astype(int)
    x = np.column_stack([covariates[n].ravel()[flat] for n in c.covariate_names]) if c.n_covariates else np.zeros((flat.size, 0))
    t_idx = np.array([SETTLEMENT_TYPES.index(t) for t in types])
    mean_log = np.array([alpha[(t, p, l)] for t, p, l in zip(types, provs, regs)])
    mean_log = mean_log + np.einsum("nk,kn->n", x, beta[:, t_idx])
    sd = np.array([log_sd[(t, p)] for t, p in zip(types, provs)])
    dens = np.exp(mean_log + sd * rng.standard_normal(flat.size))
    pop = rng.poisson(dens * area.ravel()[flat])
    true_density = np.full(shape, np.nan)
    true_density.ravel()[flat] = dens
    true_population = np.zeros(shape, dtype=np.int64)
    true_population.ravel()[flat] = pop

    pyramid = _pyramid()
    pi = {p: rng.dirichlet(pyramid * c.pyramid_concentration) for p in range(1, c.n_provinces + 1)}
    world = TrueWorld(c, seed, grid, alpha, beta, log_sd, true_density, true_population, pi)
    survey = weighted_sampling_sim(world, c.n_clusters, c.design, seed)
    return world, survey


def cell_record(world: TrueWorld, cell: int, weight=None) -> ClusterRecord:
    """The settled grid cell ``cell`` (row-major index) as a cluster record."""
    g = world.grid
    centers_x, centers_y = g.header.cell_centers()
    return ClusterRecord(
        cluster_id=f"c{cell}",
        province_id=int(g.province_id.ravel()[cell]),
        region_id=int(g.region_id.ravel()[cell]),
        settlement_type=SETTLEMENT_TYPES[int(g.settlement_type.ravel()[cell]) - 1],
        population=int(world.true_population.ravel()[cell]),
        footprint_area=float(g.footprint_area.ravel()[cell]),
        covariates=tuple(float(g.covariates[k].ravel()[cell]) for k in world.covariate_names),
        sampling_weight=weight,
        centroid=(float(centers_x.ravel()[cell]), float(centers_y.ravel()[cell])),
    )


def weighted_sampling_sim(world: TrueWorld, n_clusters: int, design: str = RANDOM_DESIGN, seed: int = 0) -> Survey:
    """Draw a survey of settled cells.

    ``pop_weighted`` selects cells without replacement with probability
    proportional to true population and records ``w = N_j / mean(N)``;
    ``random`` selects uniformly and records no weight.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    flat = world.settled_index()
    if n_clusters > flat.size:
        raise DataError(f"world has {flat.size} candidate cells, {n_clusters} requested")
    pop = world.true_population.ravel()[flat].astype(float)
    if design == POP_WEIGHTED:
        if pop.sum() <= 0:
            raise DataError("pop_weighted design needs a populated world")
        p = pop / pop.sum()
        if np.count_nonzero(p) < n_clusters:
            raise DataError("fewer populated cells than requested clusters")
        chosen = np.sort(rng.choice(flat.size, size=n_clusters, replace=False, p=p))
        weights = pop[chosen] / pop.mean()
    elif design == RANDOM_DESIGN:
        chosen = np.sort(rng.choice(flat.size, size=n_clusters, replace=False))
        weights = None
    else:
        raise DataError(f"unknown design {design!r}")
    cells = flat[chosen]
    clusters = []
    records = []
    counts = {}
    for j, cell in enumerate(cells):
        rec = cell_record(world, cell, None if weights is None else float(weights[j]))
        clusters.append(rec)
        p, n, cid = rec.province_id, rec.population, rec.cluster_id
        groups = rng.multinomial(n, world.pi[p])
        counts.setdefault(p, np.zeros(N_GROUPS, dtype=np.int64))
        counts[p] += groups
        for gid in np.flatnonzero(groups):
            sex = SEXES[gid // N_BANDS]
            records.append((cid, p, sex, BAND_LOWER_EDGES[gid % N_BANDS], int(groups[gid])))
    provinces = sorted(world.pi)
    table = AgeSexTable(provinces, np.array([counts.get(p, np.zeros(N_GROUPS, dtype=np.int64)) for p in provinces]))
    return Survey(clusters, cells, table, records, design)


# --------------------------------------------------------------------------
# emission


def write_world(directory, world: TrueWorld, survey: Survey):
    """Write ``clusters.csv``, ``agesex.csv``, ``grid/*.asc`` and ``truth.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_clusters(directory / "clusters.csv", survey.clusters, world.covariate_names)
    write_agesex_records(directory / "agesex.csv", survey.agesex_records)
    save_grid(directory / "grid", world.grid)
    truth = {
        "seed": world.seed,
        "total_population": world.total_population,
        "covariates": world.covariate_names,
        "alpha": {f"{t}:{p}:{l}": v for (t, p, l), v in world.alpha.items()},
        "beta": {f"{n}:{t}": float(world.beta[k, j]) for k, n in enumerate(world.covariate_names) for j, t in enumerate(SETTLEMENT_TYPES)},
        "log_sd": {f"{t}:{p}": v for (t, p), v in world.log_sd.items()},
        "pi": {str(p): v.tolist() for p, v in world.pi.items()},
    }
    (directory / "truth.json").write_text(json.dumps(truth, indent=1))
    return directory


# --------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryRow:
    kind: str
    name: str
    true: float
    mean: float
    lo95: float
    hi95: float

    @property
    def covered(self):
        return bool(self.lo95 <= self.true <= self.hi95)


@dataclass
class RecoveryReport:
    rows: list
    total_true: Optional[float] = None
    total_mean: Optional[float] = None

    @property
    def coverage(self):
        return float(np.mean([r.covered for r in self.rows])) if self.rows else float("nan")

    def coverage_by_kind(self):
        kinds = sorted({r.kind for r in self.rows})
        return {k: float(np.mean([r.covered for r in self.rows if r.kind == k])) for k in kinds}

    @property
    def total_relative_error(self):
        if self.total_true is None or self.total_mean is None:
            return None
        return (self.total_mean - self.total_true) / self.total_true

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["kind", "parameter", "true", "mean", "lo95", "hi95", "covered"])
            for r in self.rows:
                writer.writerow([r.kind, r.name, f"{r.true:.10g}", f"{r.mean:.10g}", f"{r.lo95:.10g}", f"{r.hi95:.10g}", int(r.covered)])
            writer.writerow(["aggregate", "coverage", "", f"{self.coverage:.10g}", "", "", ""])
            if self.total_true is not None:
                writer.writerow(["aggregate", "total_population", self.total_true, f"{self.total_mean:.10g}", "", "", ""])


def _row(kind, name, true, draws):
    lo, hi = credible_interval(np.asarray(draws, dtype=float))
    return RecoveryRow(kind, name, float(true), float(np.mean(draws)), float(lo), float(hi))


def recovery_report(
    world: TrueWorld,
    layout: ModelLayout,
    draws: PosteriorDraws,
    pi_draws: ProportionDraws = None,
    total_draws=None,
) -> RecoveryReport:
    """Compare posterior draws with the generating values.

    Covers every fitted intercept, every slope, the log-density sd per
    stratum (model ``tau`` mapped through the mean cluster weight) and, if
    given, age-sex proportions and per-draw predicted totals.
    """
    pooled = draws.pooled()
    rows = []
    for cell in layout.alpha_cells:
        rows.append(_row("alpha", f"alpha[{cell[0]}:{cell[1]}:{cell[2]}]", world.alpha[cell], pooled[:, layout.slices["alpha"]][:, layout.alpha_index[cell]]))
    for k, name in enumerate(layout.covariates):
        for t in layout.types:
            true = world.beta[k, SETTLEMENT_TYPES.index(t)]
            col = draws.index(f"beta[{name}:{t}]") if layout.modes[k] == "random" else draws.index(f"beta[{name}]")
            rows.append(_row("beta", f"beta[{name}:{t}]", true, pooled[:, col]))
    tau = pooled[:, layout.slices["tau_tp"]]
    for s, stratum in enumerate(layout.strata):
        v = layout.pool_weight[layout.pool_stratum == s]
        sd_draws = 1.0 / (tau[:, s] * np.sqrt(v.mean()))
        rows.append(_row("log_sd", f"sd[{stratum[0]}:{stratum[1]}]", world.log_sd[stratum], sd_draws))
    if pi_draws is not None:
        for j, p in enumerate(pi_draws.provinces):
            for g in range(N_GROUPS):
                rows.append(_row("pi", f"pi[{p}:{g}]", world.pi[p][g], pi_draws.draws[:, j, g]))
    total_mean = None if total_draws is None else float(np.mean(total_draws))
    return RecoveryReport(rows, float(world.total_population) if total_draws is not None else None, total_mean)


def with_population(world: TrueWorld, population) -> TrueWorld:
    """Copy of ``world`` with its true population raster replaced."""
    return replace(world, true_population=np.asarray(population, dtype=np.int64).reshape(world.true_population.shape))


# --------------------------------------------------------------------------
# replicate experiments


@dataclass
class BiasReplicate:
    seed: int
    truth: int
    weighted: float  # posterior mean total, weighted-precision model
    ablation: float  # posterior mean total, all model weights equal

    @property
    def weighted_error(self):
        return self.weighted / self.truth - 1.0

    @property
    def ablation_error(self):
        return self.ablation / self.truth - 1.0

    def passed(self, tolerance=0.05):
        return abs(self.weighted_error) <= tolerance and self.ablation > self.truth


def bias_replicate(config: WorldConfig, seed: int, chains: ChainConfig, n_pred_draws=100, percentile=None) -> BiasReplicate:
    """Total-population estimates under population-weighted sampling.

    Fits the model twice on the same survey: with the recorded sampling
    weights and with the weights removed, then predicts every settled cell.
    ``percentile`` truncates the weights first (``None`` keeps them exact).
    """
    world, survey = gen_world(replace(config, design=POP_WEIGHTED), seed)
    modes = [RANDOM] * config.n_covariates
    totals = []
    for ablate in (False, True):
        clusters = [replace(c, sampling_weight=None) for c in survey.clusters] if ablate else survey.clusters
        clusters, _ = prepare_clusters(clusters, percentile)
        fit = fit_density(clusters, world.covariate_names, modes, replace(chains, seed=seed))
        pred = predict_grid(fit.layout, fit.draws, world.grid, n_pred_draws, seed)
        totals.append(float(pred.cell_draws.sum(axis=1).mean()))
    return BiasReplicate(seed, world.total_population, totals[0], totals[1])


@dataclass
class CalibrationReplicate:
    seed: int
    covered: int  # held-out cells whose true total lies in the 95% interval
    n_cells: int
    parameter_coverage: float
    max_rhat: float


def calibration_replicate(config: WorldConfig, seed: int, chains: ChainConfig, n_pred_draws=200, n_holdout=100):
    """Fit one world and check interval coverage of true cell totals.

    Coverage is measured on ``n_holdout`` settled cells outside the survey,
    predicted from the posterior exactly as grid cells are.
    """
    world, survey = gen_world(config, seed)
    clusters, _ = prepare_clusters(survey.clusters)
    fit = fit_density(clusters, world.covariate_names, [RANDOM] * config.n_covariates, replace(chains, seed=seed))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    candidates = np.setdiff1d(world.settled_index(), survey.cell_index)
    cells = np.sort(rng.choice(candidates, size=min(n_holdout, candidates.size), replace=False))
    held = [cell_record(world, int(c)) for c in cells]
    draws = predict_clusters(fit.layout, select_draws(fit.draws, n_pred_draws), held, seed)
    lo, hi = credible_interval(draws, axis=0)
    truth = np.array([c.population for c in held])
    report = recovery_report(world, fit.layout, fit.draws)
    return CalibrationReplicate(seed, int(np.sum((truth >= lo) & (truth <= hi))), len(held), report.coverage, float(np.max(fit.rhat())))
