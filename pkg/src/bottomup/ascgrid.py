"""ESRI ASCII grid (``.asc``) reading and writing.

Arrays are held in memory as ``float64`` with ``NaN`` marking nodata and row 0
being the northernmost row, matching the file layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GridHeader:
    ncols: int
    nrows: int
    xllcorner: float = 0.0
    yllcorner: float = 0.0
    cellsize: float = 100.0
    nodata: float = DEFAULT_NODATA

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    def matches(self, other: "GridHeader", rtol=1e-9) -> bool:
        """True when both headers describe the same cell lattice."""
        if (self.ncols, self.nrows) != (other.ncols, other.nrows):
            return False
        return all(
            math.isclose(a, b, rel_tol=rtol, abs_tol=1e-9)
            for a, b in [
                (self.xllcorner, other.xllcorner),
                (self.yllcorner, other.yllcorner),
                (self.cellsize, other.cellsize),
            ]
        )

    def cell_centers(self):
        """Planar ``(x, y)`` arrays of cell centres, each of shape ``(nrows, ncols)``."""
        cols = self.xllcorner + (np.arange(self.ncols) + 0.5) * self.cellsize
        rows = self.yllcorner + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize
        return np.meshgrid(cols, rows)


def read_asc(path):
    """Read an ``.asc`` file; returns ``(header, array)`` with nodata as NaN."""
    path = Path(path)
    values = {}
    with path.open() as fh:
        lines = fh.readlines()
    n_header = 0
    for line in lines:
        parts = line.split()
        if not parts:
            n_header += 1
            continue
        key = parts[0].lower()
        if key in ("nodata", "nodatavalue"):
            key = "nodata_value"
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise GridFormatError(f"{path}: malformed header line {line.strip()!r}")
        values[key] = float(parts[1])
        n_header += 1
    missing = [k for k in _HEADER_KEYS[:5] if k not in values]
    if missing:
        raise GridFormatError(f"{path}: header missing {', '.join(missing)}")
    header = GridHeader(
        ncols=int(values["ncols"]),
        nrows=int(values["nrows"]),
        xllcorner=values["xllcorner"],
        yllcorner=values["yllcorner"],
        cellsize=values["cellsize"],
        nodata=values.get("nodata_value", DEFAULT_NODATA),
    )
    body = " ".join(lines[n_header:]).split()
    if len(body) != header.nrows * header.ncols:
        raise GridFormatError(
            f"{path}: expected {header.nrows * header.ncols} values, found {len(body)}"
        )
    data = np.array(body, dtype=float).reshape(header.shape)
    data[data == header.nodata] = np.nan
    return header, data


def _fmt(value):
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def write_asc(path, array, header: GridHeader):
    """Write ``array`` (NaN = nodata) using ``header``'s lattice."""
    array = np.asarray(array, dtype=float)
    if array.shape != header.shape:
        raise GridFormatError(f"array shape {array.shape} does not match header {header.shape}")
    lines = [
        f"ncols {header.ncols}",
        f"nrows {header.nrows}",
        f"xllcorner {_fmt(header.xllcorner)}",
        f"yllcorner {_fmt(header.yllcorner)}",
        f"cellsize {_fmt(header.cellsize)}",
        f"NODATA_value {_fmt(header.nodata)}",
    ]
    nodata = _fmt(header.nodata)
    for row in array:
        lines.append(" ".join(nodata if np.isnan(v) else _fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
