"""Synthetic views of the DEM: horizon panoramas, perspective renders, XYZ bands.

All renderers share one ray-marching rule: rays advance in ground-distance
steps of at most cell_size / 2 out to min(max_range, grid boundary). Outputs
are deterministic for any chunking of the per-azimuth / per-pixel work.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, pixel_ray
from .errors import CameraOutsideGrid
from .terrain import DemGrid, sample_elevation_grid

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_REFRACTION_K = 0.13
EYE_HEIGHT_M = 1.6
GROUND_CLEARANCE_M = 0.1
_BISECT_ITERS = 40


@dataclass(frozen=True)
class SyntheticPanorama:
    """Per-azimuth horizon records around a camera position.

    azimuths cover [0, 2pi) at a uniform step; elevations are the horizon
    elevation angles, ranges the ground distance of the winning sample and
    points its world XYZ.
    """

    azimuth_step: float
    azimuths: np.ndarray
    elevations: np.ndarray
    ranges: np.ndarray
    points: np.ndarray
    camera: np.ndarray


@dataclass(frozen=True)
class XyzBands:
    """Per-pixel world coordinates aligned to an oriented image; NaN = sky."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @property
    def shape(self):
        return self.x.shape

    def valid_mask(self) -> np.ndarray:
        return ~np.isnan(self.z)

    def lookup(self, u: float, v: float) -> np.ndarray:
        """World XYZ at integer pixel (row v, col u); NaN triple for sky."""
        r, c = int(round(v)), int(round(u))
        return np.array([self.x[r, c], self.y[r, c], self.z[r, c]])


def _resolve_camera(grid: DemGrid, cam) -> np.ndarray:
    cam = np.asarray(cam, dtype=np.float64).reshape(3).copy()
    if not grid.contains(cam[0], cam[1]):
        raise CameraOutsideGrid(f"camera ({cam[0]}, {cam[1]}) outside grid extent")
    z_terr = sample_elevation_grid(grid, cam[:1], cam[1:2])[0]
    if np.isnan(z_terr):
        raise CameraOutsideGrid(f"terrain undefined (nodata) at camera ({cam[0]}, {cam[1]})")
    if cam[2] <= z_terr + GROUND_CLEARANCE_M:
        raised = z_terr + EYE_HEIGHT_M
        logger.info("camera Z %.2f at/below terrain %.2f; raised to %.2f", cam[2], z_terr, raised)
        cam[2] = raised
    return cam


def _ground_steps(grid: DemGrid, max_range: float) -> np.ndarray:
    """Distances d_1..d_n with uniform step <= cell_size/2 and d_n == max_range."""
    n = max(1, int(math.ceil(max_range / (grid.cell_size / 2.0))))
    return max_range / n * np.arange(1, n + 1)


def _curvature_drop(d: np.ndarray, refraction_k: float) -> np.ndarray:
    return d**2 * (1.0 - refraction_k) / (2.0 * EARTH_RADIUS_M)


def render_horizon_panorama(
    grid: DemGrid,
    cam,
    azimuth_step: float,
    max_range: float,
    curvature: bool = False,
    refraction_k: float = DEFAULT_REFRACTION_K,
    threads: int = 1,
) -> SyntheticPanorama:
    """March a ray per azimuth and keep the running-maximum elevation angle.

    azimuth_step must divide 2pi (within 1e-9). With curvature on, sample
    heights are dropped by d^2 (1 - k) / (2 R_earth) before the angle.
    """
    n_az = int(round(2.0 * math.pi / azimuth_step))
    if n_az < 1 or abs(n_az * azimuth_step - 2.0 * math.pi) > 1e-9:
        raise ValueError(f"azimuth_step {azimuth_step} does not divide 2*pi")
    cam = _resolve_camera(grid, cam)
    azimuths = azimuth_step * np.arange(n_az)
    d = _ground_steps(grid, max_range)
    drop = _curvature_drop(d, refraction_k) if curvature else 0.0

    elevations = np.empty(n_az)
    ranges = np.empty(n_az)
    points = np.empty((n_az, 3))

    chunk = max(1, n_az // max(1, threads) if threads > 1 else n_az)
    for start in range(0, n_az, chunk):
        az = azimuths[start : start + chunk]
        x = cam[0] + d[None, :] * np.sin(az)[:, None]
        y = cam[1] + d[None, :] * np.cos(az)[:, None]
        z = sample_elevation_grid(grid, x, y)
        ang = np.arctan2(z - cam[2] - drop, d[None, :])
        ang = np.where(np.isnan(ang), -np.inf, ang)
        best = np.argmax(ang, axis=1)
        rows = np.arange(az.size)
        elevations[start : start + chunk] = ang[rows, best]
        ranges[start : start + chunk] = d[best]
        points[start : start + chunk, 0] = x[rows, best]
        points[start : start + chunk, 1] = y[rows, best]
        points[start : start + chunk, 2] = z[rows, best]

    return SyntheticPanorama(
        azimuth_step=azimuth_step,
        azimuths=azimuths,
        elevations=elevations,
        ranges=ranges,
        points=points,
        camera=cam,
    )


def _march_rays(grid, cam, dirs, max_range):
    """First terrain hit for unit world-frame ray directions from cam.

    Returns (xyz (n, 3) with NaN rows for sky). Marching in ground distance
    plus bisection refinement of the crossing.
    """
    n = dirs.shape[0]
    dh = np.hypot(dirs[:, 0], dirs[:, 1])
    dh = np.maximum(dh, 1e-12)
    ux = dirs[:, 0] / dh
    uy = dirs[:, 1] / dh
    slope = dirs[:, 2] / dh

    d = _ground_steps(grid, max_range)
    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    for dk in d:
        if not active.any():
            break
        idx = np.flatnonzero(active)
        x = cam[0] + dk * ux[idx]
        y = cam[1] + dk * uy[idx]
        zt = sample_elevation_grid(grid, x, y)
        ray_z = cam[2] + dk * slope[idx]
        below = ray_z <= zt
        out = np.isnan(zt)
        hit = idx[below & ~out]
        hi[hit] = dk
        active[idx[below | out]] = False
        lo[idx[~(below | out)]] = dk

    found = ~np.isnan(hi)
    xyz = np.full((n, 3), np.nan)
    if found.any():
        fi = np.flatnonzero(found)
        a = lo[fi]
        b = hi[fi]
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (a + b)
            x = cam[0] + mid * ux[fi]
            y = cam[1] + mid * uy[fi]
            zt = sample_elevation_grid(grid, x, y)
            ray_z = cam[2] + mid * slope[fi]
            below = (ray_z <= zt) | np.isnan(zt)
            b = np.where(below, mid, b)
            a = np.where(below, a, mid)
        dhit = 0.5 * (a + b)
        xyz[fi, 0] = cam[0] + dhit * ux[fi]
        xyz[fi, 1] = cam[1] + dhit * uy[fi]
        xyz[fi, 2] = cam[2] + dhit * slope[fi]
    return xyz


def _march_pixels(grid: DemGrid, pose: CameraPose, max_range: float, threads: int = 1) -> XyzBands:
    k = pose.intrinsics
    h, w = k.height, k.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs = pixel_ray(pose, uu.ravel(), vv.ravel())
    n = dirs.shape[0]
    xyz = np.empty((n, 3))
    chunk = max(1, n // max(1, threads) if threads > 1 else n)
    chunk = min(chunk, 65536)
    for start in range(0, n, chunk):
        xyz[start : start + chunk] = _march_rays(
            grid, pose.t, dirs[start : start + chunk], max_range
        )
    return XyzBands(
        x=xyz[:, 0].reshape(h, w), y=xyz[:, 1].reshape(h, w), z=xyz[:, 2].reshape(h, w)
    )


def _grid_slope(grid: DemGrid) -> np.ndarray:
    gy, gx = np.gradient(grid.elevations, grid.cell_size)
    return np.hypot(gx, gy)


def shade_bands(grid: DemGrid, bands: XyzBands, shading: str = "hypsometric") -> np.ndarray:
    """Cosmetic grey shading of a rendered view. Sky pixels are 1.0 (bright)."""
    valid = bands.valid_mask()
    img = np.ones(bands.shape)
    if shading == "hypsometric":
        zmin = float(np.nanmin(grid.elevations))
        zmax = float(np.nanmax(grid.elevations))
        span = max(zmax - zmin, 1e-9)
        vals = (bands.z[valid] - zmin) / span
        img[valid] = 0.10 + 0.65 * np.clip(vals, 0.0, 1.0)
    elif shading == "slope":
        slope = _grid_slope(grid)
        cols = np.clip(
            np.round((bands.x[valid] - grid.origin_easting) / grid.cell_size).astype(int),
            0,
            grid.n_cols - 1,
        )
        rows = np.clip(
            np.round((grid.max_northing - bands.y[valid]) / grid.cell_size).astype(int),
            0,
            grid.n_rows - 1,
        )
        img[valid] = 0.10 + 0.65 * np.exp(-slope[rows, cols])
    else:
        raise ValueError(f"unknown shading '{shading}'")
    return img


def render_view(
    grid: DemGrid,
    pose: CameraPose,
    shading: str = "hypsometric",
    max_range: float = 20_000.0,
    threads: int = 1,
) -> tuple[np.ndarray, XyzBands]:
    """Perspective render: per-pixel first terrain intersection, shaded grey
    raster plus the XYZ bands. Sky pixels are bright with NaN bands."""
    cam = _resolve_camera(grid, pose.t)
    if cam[2] != pose.t[2]:
        pose = CameraPose(t=cam, r=pose.r, intrinsics=pose.intrinsics, covariance=pose.covariance)
    bands = _march_pixels(grid, pose, max_range, threads)
    return shade_bands(grid, bands, shading), bands


def backproject_xyz(
    grid: DemGrid, pose: CameraPose, max_range: float = 20_000.0, threads: int = 1
) -> XyzBands:
    """XYZ bands of an oriented image: render_view geometry without shading."""
    cam = _resolve_camera(grid, pose.t)
    if cam[2] != pose.t[2]:
        pose = CameraPose(t=cam, r=pose.r, intrinsics=pose.intrinsics, covariance=pose.covariance)
    return _march_pixels(grid, pose, max_range, threads)


def render_panorama_strip(
    grid: DemGrid,
    cam,
    azimuth_step: float,
    elev_min: float,
    elev_max: float,
    n_elev_rows: int,
    max_range: float,
    shading: str = "hypsometric",
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cylindrical strip render (rows = elevation angles, cols = azimuths).

    Returns (strip raster, column azimuths, row elevation angles, top first).
    Feeds the multi-scale patch-correlation orientation method.
    """
    n_az = int(round(2.0 * math.pi / azimuth_step))
    if abs(n_az * azimuth_step - 2.0 * math.pi) > 1e-9:
        raise ValueError(f"azimuth_step {azimuth_step} does not divide 2*pi")
    cam = _resolve_camera(grid, cam)
    azimuths = azimuth_step * np.arange(n_az)
    elevs = np.linspace(elev_max, elev_min, n_elev_rows)
    tan_e = np.tan(elevs)

    d = _ground_steps(grid, max_range)
    strip = np.ones((n_elev_rows, n_az))
    zmin = float(np.nanmin(grid.elevations))
    zmax = float(np.nanmax(grid.elevations))
    span = max(zmax - zmin, 1e-9)
    slope_map = _grid_slope(grid) if shading == "slope" else None

    chunk = max(1, n_az // max(1, threads) if threads > 1 else min(n_az, 128))
    for start in range(0, n_az, chunk):
        az = azimuths[start : start + chunk]
        x = cam[0] + d[None, :] * np.sin(az)[:, None]
        y = cam[1] + d[None, :] * np.cos(az)[:, None]
        z = sample_elevation_grid(grid, x, y)
        rel = z - cam[2]
        # (col, row, step): does the terrain reach a ray at elevation e by step k
        above = rel[:, None, :] >= d[None, None, :] * tan_e[None, :, None]
        above &= ~np.isnan(rel)[:, None, :]
        hit_any = above.any(axis=2)
        first = np.argmax(above, axis=2)
        cc, rr = np.nonzero(hit_any)
        kk = first[cc, rr]
        if shading == "hypsometric":
            vals = 0.10 + 0.65 * np.clip((z[cc, kk] - zmin) / span, 0.0, 1.0)
        else:
            ci = np.clip(
                np.round((x[cc, kk] - grid.origin_easting) / grid.cell_size).astype(int),
                0,
                grid.n_cols - 1,
            )
            ri = np.clip(
                np.round((grid.max_northing - y[cc, kk]) / grid.cell_size).astype(int),
                0,
                grid.n_rows - 1,
            )
            vals = 0.10 + 0.65 * np.exp(-slope_map[ri, ci])
        strip[rr, start + cc] = vals

    return strip, azimuths, elevs
