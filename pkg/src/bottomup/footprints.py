"""Building footprint attributes, focal summaries and settlement classes.

Footprints are planar polygons in metres. Distances between footprints use
centroids; zone membership is decided by centroid containment.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import Point, Polygon

from .ascgrid import GridHeader
from .data import SETTLEMENT_CODES, ClusterRecord

log = logging.getLogger(__name__)

PROXIMITY_EPS = 0.1  # metres; clamps duplicate digitisations
M2_PER_HA = 10_000.0

# input land-cover classes of the settlement layer
BUILT_UP = 1
SMALL_SETTLEMENT = 2
HAMLET = 3
_CLASS_TO_TYPE = {
    BUILT_UP: SETTLEMENT_CODES["urban"],
    SMALL_SETTLEMENT: SETTLEMENT_CODES["rural"],
    HAMLET: SETTLEMENT_CODES["rural"],
}


class FootprintError(ValueError):
    pass


@dataclass(frozen=True)
class Footprint:
    id: str
    polygon: Polygon = field(repr=False)
    area: float  # ha
    perimeter: float  # m
    node_count: int
    centroid: tuple
    proximity: Optional[float] = None  # 1/m
    focal_count: Optional[float] = None


def _as_polygon(polygon) -> Polygon:
    if isinstance(polygon, Polygon):
        return polygon
    if isinstance(polygon, str):
        geom = shapely.from_wkt(polygon)
        if not isinstance(geom, Polygon):
            raise FootprintError(f"expected a POLYGON, got {geom.geom_type}")
        return geom
    return Polygon(polygon)


def footprint_metrics(polygon):
    """Area (ha), perimeter (m) and vertex count of a simple polygon."""
    try:
        poly = _as_polygon(polygon)
    except (ValueError, shapely.errors.GEOSException) as exc:
        raise FootprintError(f"unreadable polygon: {exc}") from None
    ring = np.asarray(poly.exterior.coords)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(np.unique(ring, axis=0)) < 3:
        raise FootprintError("polygon needs at least 3 distinct vertices")
    if not poly.area > 0:
        raise FootprintError("degenerate polygon (zero area)")
    if not poly.is_valid:
        raise FootprintError(f"invalid polygon: {shapely.is_valid_reason(poly)}")
    return {"area": poly.area / M2_PER_HA, "perimeter": poly.exterior.length, "node_count": len(ring)}


def make_footprint(fid, polygon) -> Footprint:
    poly = _as_polygon(polygon)
    m = footprint_metrics(poly)
    c = poly.centroid
    return Footprint(str(fid), poly, m["area"], m["perimeter"], m["node_count"], (c.x, c.y))


def load_footprints(path) -> list[Footprint]:
    """Read an ``id,wkt_polygon`` CSV and attach proximities."""
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"id", "wkt_polygon"} <= set(reader.fieldnames):
            raise FootprintError(f"{path}: header must contain id,wkt_polygon")
        for row_no, row in enumerate(reader, start=2):
            try:
                out.append(make_footprint(row["id"], row["wkt_polygon"]))
            except (FootprintError, shapely.errors.GEOSException) as exc:
                raise FootprintError(f"{path}: row {row_no}: {exc}") from None
    return with_proximity(out)


def _centroids(footprints):
    return np.array([f.centroid for f in footprints], dtype=float).reshape(-1, 2)


def nearest_proximity(footprints: Sequence[Footprint], eps=PROXIMITY_EPS):
    """Inverse centroid distance to the nearest other footprint (1/m)."""
    xy = _centroids(footprints)
    if len(xy) < 2:
        log.warning("proximity undefined for fewer than two footprints")
        return np.full(len(xy), np.nan)
    d, _ = cKDTree(xy).query(xy, k=2)
    return 1.0 / np.maximum(d[:, 1], eps)


def with_proximity(footprints: Sequence[Footprint]):
    prox = nearest_proximity(footprints)
    return [replace(f, proximity=float(p)) for f, p in zip(footprints, prox)]


# --------------------------------------------------------------------------
# rasters


def focal_count(count_raster, radius_cells: int):
    """Mean of valid cells in the ``(2r+1)^2`` window around every cell.

    Windows shrink at the edges; NaN cells are excluded from both sums and
    stay NaN in the output.
    """
    if radius_cells < 1:
        raise ValueError("radius must be at least one cell")
    a = np.asarray(count_raster, dtype=float)
    valid = np.isfinite(a)
    r = int(radius_cells)

    def box_sum(x):
        s = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
        s[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
        rows, cols = x.shape
        r0 = np.clip(np.arange(rows) - r, 0, rows)
        r1 = np.clip(np.arange(rows) + r + 1, 0, rows)
        c0 = np.clip(np.arange(cols) - r, 0, cols)
        c1 = np.clip(np.arange(cols) + r + 1, 0, cols)
        return s[r1][:, c1] - s[r0][:, c1] - s[r1][:, c0] + s[r0][:, c0]

    total = box_sum(np.where(valid, a, 0.0))
    n = box_sum(valid.astype(float))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / n
    out[~valid | (n == 0)] = np.nan
    return out


def radius_for_distance(metres, cellsize):
    """Whole-cell focal radius approximating a window half-width in metres."""
    return max(1, int(round(metres / cellsize)))


def classify_settlement(class_raster):
    """Map built-up to urban (1) and small settlement / hamlet to rural (2).

    NaN stays NaN. Output codes map to themselves, so the function is
    idempotent.
    """
    a = np.asarray(class_raster, dtype=float)
    finite = np.isfinite(a)
    codes = set(np.unique(a[finite]).tolist())
    unknown = codes - set(_CLASS_TO_TYPE)
    if unknown:
        raise FootprintError(f"unknown settlement class code(s): {sorted(unknown)}")
    out = np.full(a.shape, np.nan)
    for src, dst in _CLASS_TO_TYPE.items():
        out[a == src] = dst
    return out


# --------------------------------------------------------------------------
# zone summaries


@dataclass
class ZoneSummary:
    zone_id: object
    building_count: int
    total_area: float
    mean_area: float
    mean_perimeter: float
    mean_proximity: float
    mean_focal_count: float
    cv: dict


def _cv(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0 or values.mean() == 0:
        return np.nan
    return float(values.std() / values.mean())


def _mean(values):
    values = np.asarray([v for v in values if v is not None], dtype=float)
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else np.nan


def summarize_footprints(footprints: Sequence[Footprint], zone_id=None) -> ZoneSummary:
    if not footprints:
        return ZoneSummary(zone_id, 0, 0.0, np.nan, np.nan, np.nan, np.nan, {})
    area = [f.area for f in footprints]
    perim = [f.perimeter for f in footprints]
    prox = [f.proximity for f in footprints]
    focal = [f.focal_count for f in footprints]
    cv = {"area": _cv(area), "perimeter": _cv(perim)}
    if any(p is not None for p in prox):
        cv["proximity"] = _cv([p for p in prox if p is not None])
    return ZoneSummary(
        zone_id,
        len(footprints),
        float(np.sum(area)),
        float(np.mean(area)),
        float(np.mean(perim)),
        _mean(prox),
        _mean(focal),
        cv,
    )


def summarize_zone(footprints: Sequence[Footprint], zone, zone_id=None) -> ZoneSummary:
    """Summaries over footprints whose centroid lies inside ``zone``."""
    zone = _as_polygon(zone)
    xy = _centroids(footprints)
    inside = shapely.within(shapely.points(xy), zone) if len(xy) else np.zeros(0, dtype=bool)
    return summarize_footprints([f for f, keep in zip(footprints, inside) if keep], zone_id)


def cell_of_points(header: GridHeader, xy):
    """Row-major cell index for each point, -1 when outside the grid."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    col = np.floor((xy[:, 0] - header.xllcorner) / header.cellsize).astype(int)
    row_from_south = np.floor((xy[:, 1] - header.yllcorner) / header.cellsize).astype(int)
    row = header.nrows - 1 - row_from_south
    ok = (col >= 0) & (col < header.ncols) & (row >= 0) & (row < header.nrows)
    return np.where(ok, row * header.ncols + col, -1)


def summarize_cells(footprints: Sequence[Footprint], header: GridHeader):
    """Per-cell rasters: building count, total/mean area, mean perimeter,
    mean proximity and area CV (NaN where a cell has no buildings)."""
    n_cells = header.nrows * header.ncols
    cell = cell_of_points(header, _centroids(footprints))
    keep = cell >= 0
    cell = cell[keep]
    fps = [f for f, k in zip(footprints, keep) if k]
    area = np.array([f.area for f in fps])
    perim = np.array([f.perimeter for f in fps])
    prox = np.array([np.nan if f.proximity is None else f.proximity for f in fps])
    count = np.bincount(cell, minlength=n_cells).astype(float)
    total = np.bincount(cell, area, n_cells)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_area = total / count
        sq = np.bincount(cell, area**2, n_cells) / count
        cv_area = np.sqrt(np.maximum(sq - mean_area**2, 0.0)) / mean_area
        mean_perim = np.bincount(cell, perim, n_cells) / count
        ok = np.isfinite(prox)
        mean_prox = np.bincount(cell[ok], prox[ok], n_cells) / np.bincount(cell[ok], minlength=n_cells)
    shape = header.shape
    return {
        "building_count": count.reshape(shape),
        "total_area": total.reshape(shape),
        "mean_area": mean_area.reshape(shape),
        "mean_perimeter": mean_perim.reshape(shape),
        "mean_proximity": mean_prox.reshape(shape),
        "cv_area": cv_area.reshape(shape),
    }


def constrain_cluster_extent(household_points, footprints: Sequence[Footprint], radius_m=50.0):
    """Footprints whose centroid lies within ``radius_m`` of any household."""
    pts = np.asarray(household_points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise FootprintError("no household points")
    if not footprints:
        return []
    d, _ = cKDTree(pts).query(_centroids(footprints), k=1)
    return [f for f, dist in zip(footprints, d) if dist <= radius_m]


def read_households(path):
    """``cluster_id,x,y`` CSV as ``{cluster_id: (n, 2) array}``."""
    out: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row_no, row in enumerate(reader, start=2):
            try:
                out.setdefault(row["cluster_id"], []).append((float(row["x"]), float(row["y"])))
            except (KeyError, ValueError) as exc:
                raise FootprintError(f"{path}: row {row_no}: {exc}") from None
    return {k: np.array(v) for k, v in out.items()}


def covariate_screen(clusters: Sequence[ClusterRecord], names: Sequence[str]):
    """Pearson r of each covariate with log density, sorted by ``|r|``.

    Returns a list of ``(name, r)``; zero-variance covariates get NaN and
    sort last.
    """
    if len(clusters) < 3:
        raise ValueError("need at least 3 clusters")
    dens = np.array([c.population / c.footprint_area for c in clusters], dtype=float)
    if np.any(~(dens > 0)):
        raise ValueError("log density needs positive densities")
    y = np.log(dens)
    x = np.array([c.covariates for c in clusters], dtype=float)
    out = []
    for k, name in enumerate(names):
        col = x[:, k]
        if np.ptp(col) == 0 or np.ptp(y) == 0:
            out.append((name, np.nan))
        else:
            out.append((name, float(np.corrcoef(col, y)[0, 1])))
    return sorted(out, key=lambda item: (np.isnan(item[1]), -abs(item[1]) if not np.isnan(item[1]) else 0))
