"""Digital elevation model grids: ASCII grid I/O, bilinear sampling, synthetic surfaces.

Grids are node-registered (values are elevations at cell corners) and stored
north-to-south, so ``elevations[0]`` is the northernmost row. All coordinates
are local planar east/north meters; no geodetic datum handling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidShapeParam,
    MissingHeaderKey,
    NodataNeighborhood,
    NonRectangularBody,
    OutOfExtent,
    UnparsableNumber,
)

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")

TERRAIN_KINDS = ("flat", "cone", "ridge", "gaussian_hill")


@dataclass(frozen=True)
class DemGrid:
    """Regular elevation raster with a georeferenced lower-left node.

    (origin_easting, origin_northing) is the south-west node; the grid spans
    (n_cols - 1, n_rows - 1) * cell_size meters. Immutable after construction,
    safe for concurrent reads.
    """

    origin_easting: float
    origin_northing: float
    cell_size: float
    elevations: np.ndarray
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        elev = np.asarray(self.elevations, dtype=np.float64)
        if elev.ndim != 2 or elev.shape[0] < 2 or elev.shape[1] < 2:
            raise InvalidShapeParam(f"grid must be at least 2x2, got shape {elev.shape}")
        if self.cell_size <= 0:
            raise InvalidShapeParam(f"cell_size must be > 0, got {self.cell_size}")
        valid = elev != self.nodata
        if not np.all(np.isfinite(elev[valid])):
            raise InvalidShapeParam("non-nodata elevations must be finite")
        elev = elev.copy()
        elev.flags.writeable = False
        object.__setattr__(self, "elevations", elev)

    @property
    def n_rows(self) -> int:
        return self.elevations.shape[0]

    @property
    def n_cols(self) -> int:
        return self.elevations.shape[1]

    @property
    def max_easting(self) -> float:
        return self.origin_easting + (self.n_cols - 1) * self.cell_size

    @property
    def max_northing(self) -> float:
        return self.origin_northing + (self.n_rows - 1) * self.cell_size

    def contains(self, x: float, y: float) -> bool:
        return (
            self.origin_easting <= x <= self.max_easting
            and self.origin_northing <= y <= self.max_northing
        )

    def node_coords(self, row: int, col: int) -> tuple[float, float]:
        """East/north coordinates of the node at (row, col), row 0 = north."""
        x = self.origin_easting + col * self.cell_size
        y = self.origin_northing + (self.n_rows - 1 - row) * self.cell_size
        return x, y


def load_ascii_grid(path) -> DemGrid:
    """Parse an ESRI ASCII grid file into a DemGrid.

    Header lines (any case): ncols, nrows, xllcorner, yllcorner, cellsize and
    an optional NODATA_value, followed by nrows whitespace-separated data
    rows, north first. Sampled node values equal the file values bit-exactly
    after decimal parsing.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    header: dict[str, float] = {}
    body_start = 0
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            body_start = lineno
            continue
        key = tokens[0].lower()
        if key in _HEADER_KEYS or key == "nodata_value":
            if len(tokens) != 2:
                raise UnparsableNumber(f"line {lineno}: header '{tokens[0]}' needs one value")
            try:
                header[key] = float(tokens[1])
            except ValueError:
                raise UnparsableNumber(
                    f"line {lineno}: cannot parse '{tokens[1]}' for header '{tokens[0]}'"
                ) from None
            body_start = lineno
        else:
            break

    for key in _HEADER_KEYS:
        if key not in header:
            raise MissingHeaderKey(f"header key '{key}' not found in {path}")

    n_cols = int(header["ncols"])
    n_rows = int(header["nrows"])
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(rows) >= n_rows:
            raise NonRectangularBody(f"line {lineno}: extra data row beyond nrows={n_rows}")
        if len(tokens) != n_cols:
            raise NonRectangularBody(
                f"line {lineno}: expected {n_cols} values, got {len(tokens)}"
            )
        row = []
        for tok in tokens:
            try:
                row.append(float(tok))
            except ValueError:
                raise UnparsableNumber(f"line {lineno}: cannot parse '{tok}'") from None
        rows.append(row)

    if len(rows) != n_rows:
        raise NonRectangularBody(
            f"line {len(lines)}: expected {n_rows} data rows, got {len(rows)}"
        )

    return DemGrid(
        origin_easting=header["xllcorner"],
        origin_northing=header["yllcorner"],
        cell_size=header["cellsize"],
        elevations=np.array(rows, dtype=np.float64),
        nodata=nodata,
    )


def write_ascii_grid(grid: DemGrid, path) -> None:
    """Write a DemGrid as an ESRI ASCII grid; load_ascii_grid round-trips it."""
    with open(path, "w") as fh:
        fh.write(f"ncols {grid.n_cols}\n")
        fh.write(f"nrows {grid.n_rows}\n")
        fh.write(f"xllcorner {grid.origin_easting!r}\n")
        fh.write(f"yllcorner {grid.origin_northing!r}\n")
        fh.write(f"cellsize {grid.cell_size!r}\n")
        fh.write(f"NODATA_value {grid.nodata!r}\n")
        for row in grid.elevations:
            fh.write(" ".join(repr(v) for v in row.tolist()))
            fh.write("\n")


def _fractional_index(grid: DemGrid, x, y):
    """Continuous (row_from_north, col) indices for east/north coordinates."""
    col = (np.asarray(x, dtype=np.float64) - grid.origin_easting) / grid.cell_size
    row = (grid.max_northing - np.asarray(y, dtype=np.float64)) / grid.cell_size
    return row, col


def sample_elevation(grid: DemGrid, x: float, y: float) -> float:
    """Bilinear elevation at east/north point (x, y) inside the grid extent."""
    row, col = _fractional_index(grid, x, y)
    if not (0.0 <= col <= grid.n_cols - 1 and 0.0 <= row <= grid.n_rows - 1):
        raise OutOfExtent(f"point ({x}, {y}) outside grid extent")
    r0 = min(int(math.floor(row)), grid.n_rows - 2)
    c0 = min(int(math.floor(col)), grid.n_cols - 2)
    stencil = grid.elevations[r0 : r0 + 2, c0 : c0 + 2]
    if np.any(stencil == grid.nodata):
        raise NodataNeighborhood(f"nodata node adjacent to ({x}, {y})")
    fr = row - r0
    fc = col - c0
    top = stencil[0, 0] * (1 - fc) + stencil[0, 1] * fc
    bot = stencil[1, 0] * (1 - fc) + stencil[1, 1] * fc
    return float(top * (1 - fr) + bot * fr)


def sample_elevation_grid(grid: DemGrid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling; NaN outside the extent or near nodata.

    Renderers use this to march many rays at once; the scalar
    sample_elevation keeps the strict error contract.
    """
    row, col = _fractional_index(grid, x, y)
    inside = (col >= 0.0) & (col <= grid.n_cols - 1) & (row >= 0.0) & (row <= grid.n_rows - 1)
    r0 = np.clip(np.floor(row).astype(np.intp), 0, grid.n_rows - 2)
    c0 = np.clip(np.floor(col).astype(np.intp), 0, grid.n_cols - 2)
    z00 = grid.elevations[r0, c0]
    z01 = grid.elevations[r0, c0 + 1]
    z10 = grid.elevations[r0 + 1, c0]
    z11 = grid.elevations[r0 + 1, c0 + 1]
    fr = row - r0
    fc = col - c0
    out = (
        z00 * (1 - fr) * (1 - fc)
        + z01 * (1 - fr) * fc
        + z10 * fr * (1 - fc)
        + z11 * fr * fc
    )
    bad = ~inside
    for zc in (z00, z01, z10, z11):
        bad |= zc == grid.nodata
    return np.where(bad, np.nan, out)


def synth_terrain(
    kind: str,
    n_cols: int,
    n_rows: int,
    cell_size: float,
    origin_easting: float = 0.0,
    origin_northing: float = 0.0,
    *,
    height: float = 0.0,
    amplitude: float | None = None,
    sigma: float | None = None,
    slope: float | None = None,
    center: tuple[float, float] | None = None,
    axis_azimuth: float = 0.0,
) -> DemGrid:
    """Closed-form analytic surface evaluated at grid nodes.

    Kinds:
      flat          constant ``height``
      gaussian_hill amplitude * exp(-d^2 / (2 sigma^2)) around ``center``
      cone          max(0, amplitude - slope * d) around ``center``
      ridge         gaussian profile across the line through ``center`` at
                    ``axis_azimuth`` (radians clockwise from north)
    ``center`` defaults to the grid midpoint.
    """
    if kind not in TERRAIN_KINDS:
        raise InvalidShapeParam(f"unknown terrain kind '{kind}'")
    if n_cols < 2 or n_rows < 2:
        raise InvalidShapeParam(f"grid must be at least 2x2, got {n_cols}x{n_rows}")
    if cell_size <= 0:
        raise InvalidShapeParam(f"cell_size must be > 0, got {cell_size}")

    xs = origin_easting + cell_size * np.arange(n_cols)
    ys = origin_northing + cell_size * (n_rows - 1 - np.arange(n_rows))
    xx, yy = np.meshgrid(xs, ys)

    if center is None:
        cx = origin_easting + cell_size * (n_cols - 1) / 2.0
        cy = origin_northing + cell_size * (n_rows - 1) / 2.0
    else:
        cx, cy = center

    if kind == "flat":
        z = np.full((n_rows, n_cols), float(height))
    elif kind == "gaussian_hill":
        if amplitude is None or sigma is None or sigma <= 0:
            raise InvalidShapeParam("gaussian_hill needs amplitude and sigma > 0")
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        z = amplitude * np.exp(-d2 / (2.0 * sigma**2))
    elif kind == "cone":
        if amplitude is None or slope is None or amplitude <= 0 or slope <= 0:
            raise InvalidShapeParam("cone needs amplitude > 0 and slope > 0")
        d = np.hypot(xx - cx, yy - cy)
        z = np.maximum(0.0, amplitude - slope * d)
    else:  # ridge
        if amplitude is None or sigma is None or sigma <= 0:
            raise InvalidShapeParam("ridge needs amplitude and sigma > 0")
        # signed distance to the axis line through (cx, cy) with direction
        # (sin az, cos az); the perpendicular is (cos az, -sin az)
        d = (xx - cx) * math.cos(axis_azimuth) - (yy - cy) * math.sin(axis_azimuth)
        z = amplitude * np.exp(-(d**2) / (2.0 * sigma**2))

    return DemGrid(
        origin_easting=origin_easting,
        origin_northing=origin_northing,
        cell_size=cell_size,
        elevations=z,
    )
