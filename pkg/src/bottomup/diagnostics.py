"""Residual metrics, k-fold cross-validation and spatial autocorrelation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .agesex import N_GROUPS, aggregate_counts, sample_pi
from .data import ClusterRecord, compute_model_weights
from .mcmc import ChainConfig
from .posterior import fit_density
from .predict import predict_clusters, select_draws
from .stats import credible_interval

log = logging.getLogger(__name__)

TABLE1_COLUMNS = (
    "Estimate",
    "Prediction",
    "Bias",
    "Bias (scaled)",
    "Imprecision",
    "Imprecision (scaled)",
    "Inaccuracy",
    "Inaccuracy (scaled)",
    "R²",
    "95% CI",
)
IN_SAMPLE = "In-sample"
OUT_OF_SAMPLE = "Out-of-sample"


# --------------------------------------------------------------------------
# residuals


@dataclass
class ResidualRow:
    bias: float
    imprecision: float
    inaccuracy: float
    bias_scaled: float
    imprecision_scaled: float
    inaccuracy_scaled: float
    r2: float
    coverage95: float  # percent
    n: int


def residual_metrics(observed, prediction_draws) -> ResidualRow:
    """Table-style residual summary.

    ``prediction_draws`` has shape ``(n_draws, n_units)``. Residuals are mean
    prediction minus observed; scaled residuals divide by the mean prediction
    (units predicting exactly 0 are left out of the scaled metrics).
    """
    obs = np.asarray(observed, dtype=float)
    draws = np.asarray(prediction_draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[None, :]
    if draws.shape[1] != obs.size:
        raise ValueError("observed and prediction draws are not aligned")
    if obs.size < 2:
        raise ValueError("need at least 2 units")
    pred = draws.mean(axis=0)
    resid = pred - obs
    nz = pred != 0
    scaled = resid[nz] / pred[nz]
    if np.ptp(obs) == 0 or np.ptp(pred) == 0:
        r2 = np.nan
    else:
        r2 = float(np.corrcoef(obs, pred)[0, 1] ** 2)
    lo, hi = credible_interval(draws, axis=0)
    coverage = 100.0 * float(np.mean((obs >= lo) & (obs <= hi)))
    return ResidualRow(
        bias=float(resid.mean()),
        imprecision=float(resid.std(ddof=1)),
        inaccuracy=float(np.abs(resid).mean()),
        bias_scaled=float(scaled.mean()) if scaled.size else np.nan,
        imprecision_scaled=float(scaled.std(ddof=1)) if scaled.size > 1 else np.nan,
        inaccuracy_scaled=float(np.abs(scaled).mean()) if scaled.size else np.nan,
        r2=r2,
        coverage95=coverage,
        n=int(obs.size),
    )


def _fmt(x, digits=4):
    return "" if x is None or not np.isfinite(x) else f"{x:.{digits}f}"


def write_table1(path, rows):
    """``rows`` are ``(estimate, prediction, ResidualRow)`` triples."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE1_COLUMNS)
        for estimate, prediction, r in rows:
            writer.writerow(
                [
                    estimate,
                    prediction,
                    _fmt(r.bias),
                    _fmt(r.bias_scaled),
                    _fmt(r.imprecision),
                    _fmt(r.imprecision_scaled),
                    _fmt(r.inaccuracy),
                    _fmt(r.inaccuracy_scaled),
                    _fmt(r.r2),
                    f"{r.coverage95:.2f}%",
                ]
            )


def write_scatter(path, clusters: Sequence[ClusterRecord], prediction_draws, mode: str, target="total"):
    """Observed vs predicted per cluster (one row per cluster)."""
    draws = np.asarray(prediction_draws, dtype=float)
    lo, hi = credible_interval(draws, axis=0)
    mean = draws.mean(axis=0)
    new = not Path(path).exists()
    with Path(path).open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["cluster_id", "prediction", "target", "observed", "mean", "lo95", "hi95", "settlement_type"])
        for c, m, l, h in zip(clusters, mean, lo, hi):
            obs = c.population if target == "total" else c.population / c.footprint_area
            writer.writerow([c.cluster_id, mode, target, f"{obs:.10g}", f"{m:.10g}", f"{l:.10g}", f"{h:.10g}", c.settlement_type])


# --------------------------------------------------------------------------
# cross-validation


def assign_folds(n: int, k: int, seed: int):
    """Random partition of ``n`` units into ``k`` folds of near-equal size."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of units ({n})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    folds = np.empty(n, dtype=int)
    folds[rng.permutation(n)] = np.arange(n) % k
    return folds


def _fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, 3, fold]).generate_state(1)[0])


@dataclass
class CVResult:
    clusters: list
    folds: np.ndarray
    in_sample: np.ndarray  # (n_draws, I) count draws from the full fit
    out_of_sample: np.ndarray  # (n_draws, I) count draws, each from the fold that held it out
    modes: list
    fold_rhat_max: list

    def densities(self, draws):
        area = np.array([c.footprint_area for c in self.clusters])
        return draws / area

    def report(self):
        obs = np.array([c.population for c in self.clusters], dtype=float)
        area = np.array([c.footprint_area for c in self.clusters])
        return [
            ("Population totals", IN_SAMPLE, residual_metrics(obs, self.in_sample)),
            ("Population totals", OUT_OF_SAMPLE, residual_metrics(obs, self.out_of_sample)),
            ("Population densities", IN_SAMPLE, residual_metrics(obs / area, self.in_sample / area)),
            ("Population densities", OUT_OF_SAMPLE, residual_metrics(obs / area, self.out_of_sample / area)),
        ]


def kfold_cv(
    clusters: Sequence[ClusterRecord],
    covariates: Sequence[str],
    modes,
    k: int = 10,
    seed: int = 0,
    config: ChainConfig = ChainConfig(),
    n_pred_draws: int = 1000,
    full_fit=None,
) -> CVResult:
    """Refit on each ``k-1`` folds and predict the held-out fold.

    Model weights are renormalised over every training subset. ``modes``
    may be ``"auto"``; the modes resolved on the full data are then reused
    for every fold. ``full_fit`` reuses an existing fit for the in-sample
    predictions.
    """
    clusters = list(clusters)
    folds = assign_folds(len(clusters), k, seed)
    fit = full_fit if full_fit is not None else fit_density(clusters, covariates, modes, config)
    modes = list(fit.layout.modes)
    matrix = select_draws(fit.draws, n_pred_draws)
    in_sample = predict_clusters(fit.layout, matrix, clusters, seed)
    out = np.empty((matrix.shape[0], len(clusters)), dtype=np.int64)
    rhat_max = []
    for f in range(k):
        train = [c for c, g in zip(clusters, folds) if g != f]
        test_idx = np.flatnonzero(folds == f)
        train = compute_model_weights(train)
        fold_fit = fit_density(train, covariates, modes, replace(config, seed=_fold_seed(config.seed, f)))
        rhat_max.append(float(np.nanmax(fold_fit.rhat())) if fold_fit.draws.n_chains > 1 else np.nan)
        fold_matrix = select_draws(fold_fit.draws, matrix.shape[0])
        if fold_matrix.shape[0] != matrix.shape[0]:
            raise ValueError("folds retained fewer draws than requested for prediction")
        out[:, test_idx] = predict_clusters(fold_fit.layout, fold_matrix, [clusters[i] for i in test_idx], _fold_seed(seed, f))
        log.info("fold %d/%d done", f + 1, k)
    return CVResult(clusters, folds, in_sample, out, modes, rhat_max)


def agesex_cv(records, n_draws=1000, seed=0, holdout=0.1):
    """Cluster-level check of province age-sex proportions.

    ``records`` are ``(province, sex, age, count, cluster_id)`` tuples. For
    every province ``holdout`` of its clusters (at least one) are held out;
    proportions are estimated from the rest. Observed values are the
    held-out clusters' group proportions, predictions the province
    proportion draws. Returns ``(in_sample_row, out_of_sample_row)``.
    """
    by_cluster: dict = {}
    province_of: dict = {}
    for province, sex, age, count, cid in records:
        if cid is None:
            raise ValueError("age-sex cross-validation needs a cluster_id column")
        by_cluster.setdefault(cid, []).append((province, sex, age, count))
        province_of[cid] = province
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    held = set()
    for p in sorted(set(province_of.values())):
        cids = sorted(c for c, q in province_of.items() if q == p)
        n_out = max(1, int(round(holdout * len(cids))))
        if n_out >= len(cids):
            continue
        held.update(rng.choice(cids, size=n_out, replace=False).tolist())

    def observed(cids):
        rows = []
        for cid in cids:
            table = aggregate_counts(by_cluster[cid])
            total = table.counts.sum()
            if total > 0:
                rows.append((province_of[cid], table.counts[0] / total))
        return rows

    def evaluate(train_cids, test_cids):
        table = aggregate_counts([r for c in train_cids for r in by_cluster[c]])
        pi = sample_pi(table, n_draws, seed)
        obs_rows = observed(test_cids)
        obs = np.concatenate([o for _, o in obs_rows])
        pred = np.concatenate([pi.for_province(p) for p, _ in obs_rows], axis=1)
        return residual_metrics(obs, pred)

    all_cids = sorted(by_cluster)
    train = [c for c in all_cids if c not in held]
    return evaluate(all_cids, all_cids), evaluate(train, sorted(held))


# --------------------------------------------------------------------------
# spatial autocorrelation


def knn_weights(coords, k=5):
    """Binary k-nearest-neighbour weights (sparse, not standardised)."""
    xy = np.asarray(coords, dtype=float)
    n = len(xy)
    if k >= n:
        raise ValueError("k must be smaller than the number of units")
    _, idx = cKDTree(xy).query(xy, k=k + 1)
    rows, cols = [], []
    for i in range(n):
        nbrs = [j for j in idx[i] if j != i][:k]
        rows += [i] * len(nbrs)
        cols += nbrs
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def distance_weights(coords, threshold):
    """Binary weights for pairs closer than or at ``threshold``."""
    xy = np.asarray(coords, dtype=float)
    pairs = cKDTree(xy).query_pairs(threshold * (1 + 1e-12), output_type="ndarray")
    n = len(xy)
    i, j = pairs[:, 0], pairs[:, 1]
    data = np.ones(2 * len(pairs))
    return sparse.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))


def row_standardize(w):
    w = sparse.csr_matrix(w, dtype=float)
    sums = np.asarray(w.sum(axis=1)).ravel()
    if np.any(sums == 0):
        raise ValueError("some units have no neighbours")
    return sparse.diags(1.0 / sums) @ w


@dataclass
class MoranResult:
    I: float
    expected: float
    p_value: float
    permutation_mean: float
    permutation_sd: float
    n_permutations: int


def _moran(z, w, s0):
    wz = (w @ z.T).T if z.ndim == 2 else w @ z
    return z.shape[-1] / s0 * np.sum(z * wz, axis=-1) / np.sum(z * z, axis=-1)


def morans_i(values, coords=None, rule="knn", k=5, threshold=None, weights=None, n_perm=999, seed=0):
    """Global Moran's I with row-standardised weights and a permutation test.

    Neighbours come from ``weights`` if given, otherwise ``rule`` ``"knn"``
    (``k`` nearest) or ``"distance"`` (within ``threshold``). The p-value is
    two-sided: the share of permutations at least as far from the analytic
    expectation as the observed statistic.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 4:
        raise ValueError("need at least 4 units")
    if n_perm < 999:
        raise ValueError("use at least 999 permutations")
    expected = -1.0 / (n - 1)
    if weights is None:
        if rule == "knn":
            weights = knn_weights(coords, k)
        elif rule == "distance":
            if threshold is None:
                raise ValueError("distance rule needs a threshold")
            weights = distance_weights(coords, threshold)
        else:
            raise ValueError(f"unknown neighbour rule {rule!r}")
    w = row_standardize(weights)
    s0 = float(w.sum())
    z = x - x.mean()
    if np.all(z == 0):
        log.info("constant values; Moran's I undefined")
        return MoranResult(np.nan, expected, np.nan, np.nan, np.nan, 0)
    stat = float(_moran(z, w, s0))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    perms = np.empty(n_perm)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, n_perm, chunk):
        m = min(chunk, n_perm - start)
        zp = rng.permuted(np.broadcast_to(z, (m, n)), axis=1)
        perms[start:start + m] = _moran(zp, w, s0)
    extreme = np.sum(np.abs(perms - expected) >= abs(stat - expected) - 1e-12)
    return MoranResult(stat, expected, float((extreme + 1) / (n_perm + 1)), float(perms.mean()), float(perms.std(ddof=1)), n_perm)


@dataclass
class Variogram:
    lag: np.ndarray
    gamma: np.ndarray
    count: np.ndarray


def semivariogram(values, coords, bin_edges) -> Variogram:
    """Empirical semivariogram over distance bins ``[e_k, e_{k+1})``.

    The last bin also includes its upper edge. Empty bins get NaN.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.size < 3:
        raise ValueError("need at least 2 bins")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin widths must be positive")
    x = np.asarray(values, dtype=float)
    d = pdist(np.asarray(coords, dtype=float).reshape(len(x), -1))
    sq = pdist(x[:, None], "sqeuclidean")
    b = np.searchsorted(edges, d, side="right") - 1
    b[d == edges[-1]] = edges.size - 2
    ok = (b >= 0) & (b < edges.size - 1)
    nb = edges.size - 1
    count = np.bincount(b[ok], minlength=nb)
    total = np.bincount(b[ok], sq[ok], nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(count > 0, total / (2 * count), np.nan)
    return Variogram(0.5 * (edges[:-1] + edges[1:]), gamma, count)


def write_variogram(path, v: Variogram):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lag", "gamma", "pairs"])
        for lag, g, c in zip(v.lag, v.gamma, v.count):
            writer.writerow([f"{lag:.10g}", "" if np.isnan(g) else f"{g:.10g}", int(c)])
