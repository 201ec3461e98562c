"""Survey cluster and grid data model: ingestion, weights, imputation, scaling."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ascgrid import GridHeader, read_asc, write_asc

log = logging.getLogger(__name__)

SETTLEMENT_TYPES = ("urban", "rural")
# raster coding of settlement types; shared with footprints.classify_settlement
SETTLEMENT_CODES = {"urban": 1, "rural": 2}

CLUSTER_FIXED_COLUMNS = (
    "cluster_id",
    "province_id",
    "region_id",
    "settlement_type",
    "population",
    "footprint_area_ha",
    "sampling_weight",
    "reduced_coverage",
    "x",
    "y",
)

REASON_NO_FOOTPRINTS = "no_footprints"
REASON_REDUCED_COVERAGE = "reduced_coverage"


class DataError(ValueError):
    """Invalid survey or grid input."""


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: str
    province_id: int
    region_id: int
    settlement_type: str
    population: int
    footprint_area: float
    covariates: tuple = ()
    sampling_weight: Optional[float] = None
    model_weight: Optional[float] = None
    centroid: tuple = (0.0, 0.0)
    reduced_coverage: bool = False

    @property
    def density(self):
        return self.population / self.footprint_area


@dataclass
class GridStack:
    """Co-registered rasters; nodata held as NaN."""

    header: GridHeader
    footprint_area: np.ndarray
    settlement_type: np.ndarray
    province_id: np.ndarray
    region_id: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, layer in self.layers().items():
            if np.shape(layer) != self.header.shape:
                raise DataError(f"layer {name!r} has shape {np.shape(layer)}, expected {self.header.shape}")

    def layers(self):
        out = {
            "footprint_area": self.footprint_area,
            "settlement_type": self.settlement_type,
            "province_id": self.province_id,
            "region_id": self.region_id,
        }
        out.update(self.covariates)
        return out

    @property
    def covariate_names(self):
        return list(self.covariates)

    @property
    def settled_mask(self):
        area = np.nan_to_num(self.footprint_area, nan=0.0)
        return (area > 0) & np.isfinite(self.settlement_type)


@dataclass(frozen=True)
class ScalingStats:
    names: tuple
    mean: tuple
    sd: tuple

    def apply(self, values, k):
        return (np.asarray(values, dtype=float) - self.mean[k]) / self.sd[k]

    def invert(self, values, k):
        return np.asarray(values, dtype=float) * self.sd[k] + self.mean[k]


@dataclass(frozen=True)
class Discard:
    cluster_id: str
    reason: str


# --------------------------------------------------------------------------
# cluster CSV


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("", "0", "false", "no", "f", "n"):
        return False
    if t in ("1", "true", "yes", "t", "y"):
        return True
    raise ValueError(f"not a boolean: {text!r}")


def load_clusters(path) -> list[ClusterRecord]:
    """Parse a cluster CSV into records.

    Covariate columns are every column after ``y``; their count is inferred
    from the header. Raises :class:`DataError` naming the offending row and
    column for malformed values, and listing region ids that appear under
    more than one province.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"cluster file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        n_fixed = len(CLUSTER_FIXED_COLUMNS)
        if tuple(header[:n_fixed]) != CLUSTER_FIXED_COLUMNS:
            raise DataError(
                f"{path}: header must start with {','.join(CLUSTER_FIXED_COLUMNS)}"
            )
        cov_names = header[n_fixed:]
        records = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            records.append(_parse_row(path, row_no, dict(zip(header, row)), cov_names))
    check_nesting(records)
    return records


def _parse_row(path, row_no, raw, cov_names):
    def convert(column, fn):
        try:
            return fn(raw[column].strip())
        except (ValueError, TypeError) as exc:
            raise DataError(f"{path}: row {row_no}, column {column!r}: {exc}") from None

    def nonneg_int(text):
        value = float(text)
        if value < 0 or value != int(value):
            raise ValueError(f"expected a nonnegative integer, got {text!r}")
        return int(value)

    def area(text):
        value = float(text)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"footprint area must be >= 0, got {text!r}")
        return value

    def weight(text):
        if text == "":
            return None
        value = float(text)
        if not value > 0:
            raise ValueError(f"sampling weight must be positive, got {text!r}")
        return value

    def settlement(text):
        if text not in SETTLEMENT_TYPES:
            raise ValueError(f"settlement_type must be one of {SETTLEMENT_TYPES}, got {text!r}")
        return text

    cluster_id = raw["cluster_id"].strip()
    if not cluster_id:
        raise DataError(f"{path}: row {row_no}, column 'cluster_id': empty")
    return ClusterRecord(
        cluster_id=cluster_id,
        province_id=convert("province_id", int),
        region_id=convert("region_id", int),
        settlement_type=convert("settlement_type", settlement),
        population=convert("population", nonneg_int),
        footprint_area=convert("footprint_area_ha", area),
        sampling_weight=convert("sampling_weight", weight),
        reduced_coverage=convert("reduced_coverage", _parse_bool),
        centroid=(convert("x", float), convert("y", float)),
        covariates=tuple(convert(name, float) for name in cov_names),
    )


def check_nesting(records: Sequence[ClusterRecord]):
    """Raise if any region id maps to more than one province id."""
    parents: dict[int, set] = {}
    for r in records:
        parents.setdefault(r.region_id, set()).add(r.province_id)
    bad = {reg: sorted(p) for reg, p in parents.items() if len(p) > 1}
    if bad:
        detail = "; ".join(f"region {reg} under provinces {ps}" for reg, ps in sorted(bad.items()))
        raise DataError(f"regions not nested in a single province: {detail}")
    widths = {len(r.covariates) for r in records}
    if len(widths) > 1:
        raise DataError(f"covariate count differs between clusters: {sorted(widths)}")


def write_clusters(path, records: Sequence[ClusterRecord], covariate_names: Sequence[str]):
    """Write records in the cluster CSV schema accepted by :func:`load_clusters`."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CLUSTER_FIXED_COLUMNS) + list(covariate_names))
        for r in records:
            writer.writerow(
                [
                    r.cluster_id,
                    r.province_id,
                    r.region_id,
                    r.settlement_type,
                    r.population,
                    repr(float(r.footprint_area)),
                    "" if r.sampling_weight is None else repr(float(r.sampling_weight)),
                    int(r.reduced_coverage),
                    repr(float(r.centroid[0])),
                    repr(float(r.centroid[1])),
                ]
                + [repr(float(v)) for v in r.covariates]
            )


# --------------------------------------------------------------------------
# weights and imputation


def truncate_weights(weights, percentile=0.90):
    """Cap weights at their ``percentile`` quantile (linear interpolation)."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise DataError("cannot truncate an empty weight vector")
    if not 0 < percentile < 1:
        raise DataError(f"percentile must lie in (0, 1), got {percentile}")
    cap = np.quantile(w, percentile, method="linear")
    return np.minimum(w, cap)


def impute_cluster_population(household_counts) -> int:
    """Cluster total with nonresponding households (``None``) filled by the
    mean of responding households, rounded half up."""
    observed = [c for c in household_counts if c is not None]
    if not observed:
        raise DataError("no responding household in cluster")
    if any(c < 0 for c in observed):
        raise DataError("household counts must be nonnegative")
    n_missing = len(household_counts) - len(observed)
    total = Decimal(sum(observed)) + n_missing * Decimal(sum(observed)) / Decimal(len(observed))
    return int(total.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def compute_model_weights(clusters: Sequence[ClusterRecord]) -> list[ClusterRecord]:
    """Normalized inverse sampling weights ``v_i``.

    Clusters without a sampling weight (random design) get the mean of the
    observed weights before inversion. With no observed weights at all every
    cluster receives ``1 / I``.
    """
    clusters = list(clusters)
    if not clusters:
        return []
    observed = [c.sampling_weight for c in clusters if c.sampling_weight is not None]
    if not observed:
        log.info("no sampling weights observed; treating design as simple random")
        v = np.full(len(clusters), 1.0 / len(clusters))
    else:
        fill = float(np.mean(observed))
        w = np.array([fill if c.sampling_weight is None else c.sampling_weight for c in clusters])
        inv = 1.0 / w
        v = inv / inv.sum()
    return [replace(c, model_weight=float(vi)) for c, vi in zip(clusters, v)]


def filter_spurious(clusters: Sequence[ClusterRecord]):
    """Drop clusters with no footprint area or a reduced-coverage flag.

    Returns ``(retained, discards)`` where ``discards`` is a list of
    :class:`Discard` carrying a reason code.
    """
    retained, discards = [], []
    for c in clusters:
        if c.reduced_coverage:
            discards.append(Discard(c.cluster_id, REASON_REDUCED_COVERAGE))
        elif not c.footprint_area > 0:
            discards.append(Discard(c.cluster_id, REASON_NO_FOOTPRINTS))
        else:
            retained.append(c)
    if not retained:
        log.warning("every cluster was discarded")
    return retained, discards


def prepare_clusters(clusters: Sequence[ClusterRecord], percentile: Optional[float] = 0.90):
    """Filter, truncate observed sampling weights and derive model weights.

    ``percentile=None`` skips truncation.
    """
    retained, discards = filter_spurious(clusters)
    observed = [i for i, c in enumerate(retained) if c.sampling_weight is not None]
    if percentile is not None and observed:
        capped = truncate_weights([retained[i].sampling_weight for i in observed], percentile)
        for i, w in zip(observed, capped):
            retained[i] = replace(retained[i], sampling_weight=float(w))
    return compute_model_weights(retained), discards


# --------------------------------------------------------------------------
# grids and covariate scaling


def scale_covariates(clusters: Sequence[ClusterRecord], grid: GridStack, names=None):
    """Z-score cluster and grid covariates with grid-level statistics.

    Mean and standard deviation are computed over settled grid cells. Cluster
    covariates are matched to grid layers by position in ``names`` (default:
    the grid's covariate order).
    """
    names = list(names or grid.covariate_names)
    mask = grid.settled_mask
    if mask.sum() < 2:
        raise DataError("need at least two settled grid cells to scale covariates")
    means, sds = [], []
    for name in names:
        if name not in grid.covariates:
            raise DataError(f"grid has no covariate layer {name!r}")
        vals = grid.covariates[name][mask]
        if not np.all(np.isfinite(vals)):
            raise DataError(f"covariate {name!r} has nodata inside the settled mask")
        sd = float(vals.std(ddof=1))
        if not sd > 0:
            raise DataError(f"covariate {name!r} has zero variance over settled cells")
        means.append(float(vals.mean()))
        sds.append(sd)
    stats = ScalingStats(tuple(names), tuple(means), tuple(sds))
    scaled_layers = {n: stats.apply(grid.covariates[n], k) for k, n in enumerate(names)}
    scaled_grid = replace(grid, covariates=scaled_layers)
    scaled_clusters = [
        replace(c, covariates=tuple(float(stats.apply(c.covariates[k], k)) for k in range(len(names))))
        for c in clusters
    ]
    return scaled_clusters, scaled_grid, stats


def unscale_covariates(clusters: Sequence[ClusterRecord], stats: ScalingStats):
    return [
        replace(c, covariates=tuple(float(stats.invert(v, k)) for k, v in enumerate(c.covariates)))
        for c in clusters
    ]


GRID_BASE_LAYERS = ("footprint_area", "settlement_type", "province_id", "region_id")


def load_grid(directory, covariate_names: Sequence[str]) -> GridStack:
    """Read ``<layer>.asc`` files from ``directory`` and check co-registration."""
    directory = Path(directory)
    headers, arrays = {}, {}
    for name in list(GRID_BASE_LAYERS) + list(covariate_names):
        path = directory / f"{name}.asc"
        if not path.exists():
            raise DataError(f"missing grid layer {path}")
        headers[name], arrays[name] = read_asc(path)
    ref = headers["footprint_area"]
    bad = [n for n, h in headers.items() if not h.matches(ref)]
    if bad:
        raise DataError(f"grid layers not co-registered with footprint_area: {', '.join(bad)}")
    return GridStack(
        header=ref,
        footprint_area=arrays["footprint_area"],
        settlement_type=arrays["settlement_type"],
        province_id=arrays["province_id"],
        region_id=arrays["region_id"],
        covariates={n: arrays[n] for n in covariate_names},
    )


def save_grid(directory, grid: GridStack):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, layer in grid.layers().items():
        write_asc(directory / f"{name}.asc", layer, grid.header)


def write_scaling_stats(path, stats: ScalingStats):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["covariate", "mean", "sd"])
        for n, m, s in zip(stats.names, stats.mean, stats.sd):
            writer.writerow([n, repr(m), repr(s)])


def covariate_names_from_csv(path):
    with Path(path).open(newline="") as fh:
        header = next(csv.reader(fh))
    return [h.strip() for h in header[len(CLUSTER_FIXED_COLUMNS):]]
