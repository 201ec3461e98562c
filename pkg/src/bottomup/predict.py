"""Posterior predictive population counts for grid cells, groups and zones.

Every posterior draw yields one stochastic prediction per unit: a log density
drawn around the linear predictor with the pooled prediction scale, then a
Poisson count with mean ``density * footprint_area``.

Random numbers come from Philox substreams keyed by ``(seed, draw, tile)``
where a tile is a fixed block of :data:`TILE` consecutive unit indices. For a
grid the unit index is the row-major cell index, so results do not depend on
traversal order or on any tile-aligned partitioning of the work.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .agesex import GROUP_LABELS, N_GROUPS, ProportionDraws
from .ascgrid import GridHeader, write_asc
from .data import SETTLEMENT_CODES, SETTLEMENT_TYPES, ClusterRecord, GridStack
from .density import ModelError, ModelLayout, ModelParams
from .mcmc import PosteriorDraws
from .stats import credible_interval, summarize

TILE = 1024
_CODE_TO_TYPE = {v: k for k, v in SETTLEMENT_CODES.items()}


def _rng(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def select_draws(draws: PosteriorDraws, n: int):
    """Evenly spaced subsample of pooled retained draws, shape ``(n, dim)``."""
    pooled = draws.pooled()
    if n is None or n >= pooled.shape[0]:
        return pooled
    idx = np.unique(np.linspace(0, pooled.shape[0] - 1, n).round().astype(int))
    return pooled[idx]


# --------------------------------------------------------------------------
# prediction scale


def tau_hat(params: ModelParams):
    """Pooled prediction sd per stratum from training-cluster sds."""
    L = params.layout
    sqrt_v = np.sqrt(L.pool_weight)
    sd = 1.0 / (params.tau_tp[L.pool_stratum] * sqrt_v)
    num = np.bincount(L.pool_stratum, sd * sqrt_v, len(L.strata))
    den = np.bincount(L.pool_stratum, sqrt_v, len(L.strata))
    return num / den


def tau_hat_by_type(params: ModelParams):
    """Fallback prediction sd per settlement type, pooled across provinces."""
    L = params.layout
    sqrt_v = np.sqrt(L.pool_weight)
    sd = 1.0 / (params.tau_tp[L.pool_stratum] * sqrt_v)
    t = L.type_of_stratum[L.pool_stratum]
    return np.bincount(t, sd * sqrt_v, len(L.types)) / np.bincount(t, sqrt_v, len(L.types))


def _tau_hat_matrix(layout: ModelLayout, matrix):
    """Per-draw pooled sds: ``(n_draws, S)`` by stratum and ``(n_draws, T)`` by type."""
    tau = matrix[:, layout.slices["tau_tp"]]
    sqrt_v = np.sqrt(layout.pool_weight)
    contrib = 1.0 / tau[:, layout.pool_stratum]  # sd_i * sqrt(v_i)
    S, T = len(layout.strata), len(layout.types)
    by_s = np.zeros((matrix.shape[0], S))
    by_t = np.zeros((matrix.shape[0], T))
    t_of_i = layout.type_of_stratum[layout.pool_stratum]
    for s in range(S):
        members = layout.pool_stratum == s
        by_s[:, s] = contrib[:, members].sum(axis=1) / sqrt_v[members].sum()
    for t in range(T):
        members = t_of_i == t
        by_t[:, t] = contrib[:, members].sum(axis=1) / sqrt_v[members].sum()
    return by_s, by_t


# --------------------------------------------------------------------------
# units


@dataclass
class Units:
    """Prediction units (grid cells or clusters) in array form."""

    settlement_type: np.ndarray  # str
    province_id: np.ndarray
    region_id: np.ndarray
    area: np.ndarray
    covariates: np.ndarray  # (n, K)
    index: np.ndarray  # RNG key per unit

    @classmethod
    def from_clusters(cls, clusters: Sequence[ClusterRecord], k: int):
        n = len(clusters)
        return cls(
            settlement_type=np.array([c.settlement_type for c in clusters], dtype=object),
            province_id=np.array([c.province_id for c in clusters], dtype=int),
            region_id=np.array([c.region_id for c in clusters], dtype=int),
            area=np.array([c.footprint_area for c in clusters], dtype=float),
            covariates=np.array([c.covariates for c in clusters], dtype=float).reshape(n, k),
            index=np.arange(n),
        )

    @classmethod
    def from_grid(cls, grid: GridStack, covariates: Sequence[str]):
        missing = [c for c in covariates if c not in grid.covariates]
        if missing:
            raise ModelError(f"grid lacks covariate layer(s): {', '.join(missing)}")
        mask = grid.settled_mask
        flat = np.flatnonzero(mask.ravel())
        codes = grid.settlement_type.ravel()[flat].astype(int)
        bad = set(np.unique(codes)) - set(_CODE_TO_TYPE)
        if bad:
            raise ModelError(f"unknown settlement codes in grid: {sorted(bad)}")
        cov = np.column_stack([grid.covariates[c].ravel()[flat] for c in covariates]) if covariates else np.zeros((flat.size, 0))
        if not np.all(np.isfinite(cov)):
            raise ModelError("covariate nodata inside settled cells")
        for name in ("province_id", "region_id"):
            if not np.all(np.isfinite(getattr(grid, name).ravel()[flat])):
                raise ModelError(f"{name} nodata inside settled cells")
        return cls(
            settlement_type=np.array([_CODE_TO_TYPE[c] for c in codes], dtype=object),
            province_id=grid.province_id.ravel()[flat].astype(int),
            region_id=grid.region_id.ravel()[flat].astype(int),
            area=grid.footprint_area.ravel()[flat].astype(float),
            covariates=cov,
            index=flat,
        )

    @property
    def n(self):
        return self.area.size


def _unit_intercepts(layout: ModelLayout, matrix, units: Units, seed):
    """Per-draw intercepts ``(n_draws, n)``; unobserved cells drawn from their hyper-distribution."""
    n_draws = matrix.shape[0]
    alpha = matrix[:, layout.slices["alpha"]]
    xi_tp = matrix[:, layout.slices["xi_tp"]]
    nu_tp = matrix[:, layout.slices["nu_tp"]]
    xi_t = matrix[:, layout.slices["xi_t"]]
    nu_t = matrix[:, layout.slices["nu_t"]]
    cells = list(zip(units.settlement_type, units.province_id.tolist(), units.region_id.tolist()))
    unique = sorted(set(cells), key=lambda c: (SETTLEMENT_TYPES.index(c[0]), c[1], c[2]))
    column = {}
    extra = []
    for cell in unique:
        if cell in layout.alpha_index:
            column[cell] = alpha[:, layout.alpha_index[cell]]
            continue
        if cell[0] not in layout.type_index:
            raise ModelError(f"settlement type {cell[0]!r} absent from the fitted model")
        extra.append(cell)
    for j, cell in enumerate(extra):
        rng = _rng(seed, 1, SETTLEMENT_TYPES.index(cell[0]), cell[1], cell[2])
        z = rng.standard_normal((n_draws, 2))
        stratum = cell[:2]
        if stratum in layout.stratum_index:
            s = layout.stratum_index[stratum]
            loc, scale = xi_tp[:, s], nu_tp[:, s]
        else:
            t = layout.type_index[cell[0]]
            loc = xi_t[:, t] + nu_t[:, t] * z[:, 1]
            scale = nu_t[:, t] * rng.random(n_draws)
        column[cell] = loc + scale * z[:, 0]
    out = np.empty((n_draws, units.n))
    lookup = {cell: i for i, cell in enumerate(unique)}
    stacked = np.column_stack([column[c] for c in unique])
    out[:] = stacked[:, [lookup[c] for c in cells]]
    return out


def _unit_scales(layout: ModelLayout, matrix, units: Units):
    by_s, by_t = _tau_hat_matrix(layout, matrix)
    out = np.empty((matrix.shape[0], units.n))
    for i, (t, p) in enumerate(zip(units.settlement_type, units.province_id.tolist())):
        if (t, p) in layout.stratum_index:
            out[:, i] = by_s[:, layout.stratum_index[(t, p)]]
        elif t in layout.type_index:
            out[:, i] = by_t[:, layout.type_index[t]]
        else:
            raise ModelError(f"settlement type {t!r} absent from the fitted model")
    return out


def _unit_slopes_dot(layout: ModelLayout, matrix, units: Units):
    n_draws = matrix.shape[0]
    K, T = len(layout.covariates), len(layout.types)
    slopes = np.zeros((n_draws, K, T))
    br = matrix[:, layout.slices["beta_random"]].reshape(n_draws, len(layout.random_k), T)
    for j, k in enumerate(layout.random_k):
        slopes[:, k, :] = br[:, j, :]
    bf = matrix[:, layout.slices["beta_fixed"]]
    for j, k in enumerate(layout.fixed_k):
        slopes[:, k, :] = bf[:, j, None]
    t_idx = np.array([layout.type_index[t] for t in units.settlement_type], dtype=int)
    if units.covariates.shape[1] != K:
        raise ModelError(f"units carry {units.covariates.shape[1]} covariates, model expects {K}")
    # (draws, n): sum_k x[n,k] * slopes[d,k,t(n)]
    return np.einsum("nk,dkn->dn", units.covariates, slopes[:, :, t_idx])


def mean_log_density_draws(layout: ModelLayout, matrix, units: Units, seed=0):
    return _unit_intercepts(layout, matrix, units, seed) + _unit_slopes_dot(layout, matrix, units)


def predict_units(layout: ModelLayout, matrix, units: Units, seed: int):
    """Predictive count draws, shape ``(n_draws, n_units)``."""
    matrix = np.atleast_2d(matrix)
    n_draws = matrix.shape[0]
    if units.n == 0:
        return np.zeros((n_draws, 0), dtype=np.int64)
    mean_log = mean_log_density_draws(layout, matrix, units, seed)
    scale = _unit_scales(layout, matrix, units)
    out = np.empty((n_draws, units.n), dtype=np.int64)
    tiles = units.index // TILE
    offsets = units.index % TILE
    groups = [(b, np.flatnonzero(tiles == b)) for b in np.unique(tiles)]
    lam = np.zeros(TILE)
    for d in range(n_draws):
        for b, members in groups:
            rng = _rng(seed, 0, d, b)
            z = rng.standard_normal(TILE)
            off = offsets[members]
            lam[:] = 0.0
            lam[off] = np.exp(mean_log[d, members] + scale[d, members] * z[off]) * units.area[members]
            out[d, members] = rng.poisson(lam)[off]
    return out


def predict_cell_draw(params: ModelParams, cell: ClusterRecord, rng) -> int:
    """One predictive count for one unit under one parameter draw."""
    if not cell.footprint_area > 0:
        return 0
    L = params.layout
    t, p, l = cell.settlement_type, cell.province_id, cell.region_id
    if t not in L.type_index:
        raise ModelError(f"settlement type {t!r} absent from the fitted model")
    if (t, p, l) in L.alpha_index:
        alpha = params.alpha[L.alpha_index[(t, p, l)]]
    elif (t, p) in L.stratum_index:
        s = L.stratum_index[(t, p)]
        alpha = rng.normal(params.xi_tp[s], params.nu_tp[s])
    else:
        ti = L.type_index[t]
        alpha = rng.normal(rng.normal(params.xi_t[ti], params.nu_t[ti]), params.nu_t[ti] * rng.random())
    slopes = params.slopes()[:, L.type_index[t]]
    mean_log = alpha + float(np.dot(slopes, cell.covariates))
    if (t, p) in L.stratum_index:
        scale = tau_hat(params)[L.stratum_index[(t, p)]]
    else:
        scale = tau_hat_by_type(params)[L.type_index[t]]
    density = np.exp(rng.normal(mean_log, scale)) if scale > 0 else np.exp(mean_log)
    return int(rng.poisson(density * cell.footprint_area))


def predict_clusters(layout: ModelLayout, matrix, clusters: Sequence[ClusterRecord], seed: int):
    return predict_units(layout, matrix, Units.from_clusters(clusters, len(layout.covariates)), seed)


# --------------------------------------------------------------------------
# grid outputs


@dataclass
class GridPrediction:
    header: GridHeader
    mask: np.ndarray
    cell_index: np.ndarray  # row-major indices of settled cells
    cell_draws: np.ndarray  # (n_draws, n_settled)
    province_id: np.ndarray  # per settled cell

    def raster(self, values):
        out = np.full(self.header.nrows * self.header.ncols, np.nan)
        out[self.cell_index] = values
        return out.reshape(self.header.shape)

    def summaries(self):
        s = summarize(self.cell_draws, axis=0)
        return {k: self.raster(v) for k, v in s.items()}


def predict_grid(layout: ModelLayout, draws, grid: GridStack, n_pred_draws=1000, seed=0) -> GridPrediction:
    """Predict every settled cell of ``grid``.

    ``draws`` is a :class:`PosteriorDraws` (subsampled to ``n_pred_draws``)
    or an explicit ``(n_draws, dim)`` matrix.
    """
    matrix = select_draws(draws, n_pred_draws) if isinstance(draws, PosteriorDraws) else np.atleast_2d(draws)
    units = Units.from_grid(grid, layout.covariates)
    cell_draws = predict_units(layout, matrix, units, seed)
    return GridPrediction(grid.header, grid.settled_mask, units.index, cell_draws, units.province_id)


def group_draws(cell_draws, cell_provinces, pi: ProportionDraws, group: int):
    """Per-draw counts of one demographic group, shape ``(n_draws, n_cells)``."""
    if pi.draws.shape[0] != cell_draws.shape[0]:
        raise ValueError(f"{cell_draws.shape[0]} cell draws but {pi.draws.shape[0]} proportion draws")
    pos = {p: j for j, p in enumerate(pi.provinces)}
    missing = sorted(set(np.unique(cell_provinces).tolist()) - set(pos))
    if missing:
        raise ValueError(f"no age-sex proportions for province(s) {missing}")
    cols = np.array([pos[p] for p in cell_provinces.tolist()], dtype=int)
    return cell_draws * pi.draws[:, cols, group]


def disaggregate_agesex(cell_draws, cell_provinces, pi: ProportionDraws):
    """Per-group summaries: dict of ``(G, n_cells)`` arrays (mean, lo95, hi95)."""
    n_cells = cell_draws.shape[1]
    mean = np.empty((N_GROUPS, n_cells))
    lo = np.empty_like(mean)
    hi = np.empty_like(mean)
    for g in range(N_GROUPS):
        gd = group_draws(cell_draws, cell_provinces, pi, g)
        mean[g] = gd.mean(axis=0)
        lo[g], hi[g] = credible_interval(gd, axis=0)
    return {"mean": mean, "lo95": lo, "hi95": hi}


def aggregate_zones(cell_draws, zone_ids):
    """Per-zone totals: per-draw sums, then mean and 95% interval of the sum.

    ``zone_ids`` gives one zone per cell (NaN = no zone). Returns
    ``{zone: {"draws", "mean", "lo95", "hi95"}}``.
    """
    zone_ids = np.asarray(zone_ids, dtype=float)
    out = {}
    cell_draws = np.asarray(cell_draws)
    for z in np.unique(zone_ids[np.isfinite(zone_ids)]):
        members = zone_ids == z
        sums = cell_draws[:, members].sum(axis=1)
        lo, hi = credible_interval(sums)
        out[int(z) if float(z).is_integer() else float(z)] = {
            "draws": sums,
            "mean": float(sums.mean()),
            "lo95": float(lo),
            "hi95": float(hi),
        }
    return out


def write_grid_outputs(directory, pred: GridPrediction, pi: ProportionDraws = None, zones=None):
    """Write ``pop_mean/lo95/hi95.asc``, optional group rasters and zone CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    s = pred.summaries()
    written = []
    for key in ("mean", "lo95", "hi95"):
        path = directory / f"pop_{key}.asc"
        write_asc(path, s[key], pred.header)
        written.append(path)
    if pi is not None:
        groups = disaggregate_agesex(pred.cell_draws, pred.province_id, pi)
        for g in range(N_GROUPS):
            path = directory / f"pop_{GROUP_LABELS[g].replace('<', 'lt').replace('+', 'plus')}.asc"
            write_asc(path, pred.raster(groups["mean"][g]), pred.header)
            written.append(path)
    if zones is not None:
        zone_of_cell = np.asarray(zones, dtype=float).ravel()[pred.cell_index]
        table = aggregate_zones(pred.cell_draws, zone_of_cell)
        path = directory / "zones.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["zone_id", "mean", "lo95", "hi95"])
            for z, row in table.items():
                writer.writerow([z, f"{row['mean']:.10g}", f"{row['lo95']:.10g}", f"{row['hi95']:.10g}"])
        written.append(path)
    return written
