"""Recover heading / tilt / roll for a GPS-located query image.

Two methods: skyline dynamic time warping against the 360-degree reference
silhouette, and multi-scale HOG patch correlation against a rendered panorama
strip. The skyline path also recovers tilt and roll from a linear model of
the vertical alignment residuals (small-angle, valid to roughly 5 degrees).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, _roll_matrix, _tilt_matrix
from .errors import (
    AllColumnsInvalid,
    DegenerateFit,
    QueryTooSmallForScale,
    TooFewValidColumns,
)
from .features import descriptor_correlation, hog_descriptor
from .panorama import SyntheticPanorama, render_horizon_panorama, render_panorama_strip

DEFAULT_SLOPE_WEIGHT = 0.5
MIN_VALID_COLUMNS = 8


@dataclass(frozen=True)
class QuerySkyline:
    """Per-column sky/ground boundary of a query image (pixels)."""

    rows: np.ndarray
    valid: np.ndarray

    @property
    def width(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class ReferenceSkyline:
    """Azimuth-indexed horizon elevation angles covering [0, 2pi) uniformly."""

    azimuths: np.ndarray
    elevations: np.ndarray

    def __post_init__(self):
        az = np.asarray(self.azimuths, dtype=np.float64)
        el = np.asarray(self.elevations, dtype=np.float64)
        if az.shape != el.shape or az.ndim != 1 or az.size < 4:
            raise ValueError("reference skyline needs matching 1-d azimuth/elevation arrays")
        step = 2.0 * math.pi / az.size
        if not np.allclose(np.diff(az), step, atol=1e-9) or abs(az[0]) > 1e-9:
            raise ValueError("reference skyline must cover [0, 2pi) at a uniform step from 0")
        object.__setattr__(self, "azimuths", az)
        object.__setattr__(self, "elevations", el)

    @property
    def step(self) -> float:
        return 2.0 * math.pi / self.azimuths.size

    @classmethod
    def from_panorama(cls, pano: SyntheticPanorama) -> "ReferenceSkyline":
        return cls(azimuths=pano.azimuths, elevations=pano.elevations)


@dataclass(frozen=True)
class AngularQuery:
    """Valid query columns converted to viewing angles via the intrinsics.

    elevations are apparent horizon elevation angles assuming zero tilt/roll;
    az_offsets are the signed azimuths of each column relative to the optical
    axis. cols keeps the original pixel column ids for the residual fit.
    """

    cols: np.ndarray
    elevations: np.ndarray
    az_offsets: np.ndarray


@dataclass(frozen=True)
class DtwAlignment:
    """Monotone subsequence alignment of a query skyline to the reference.

    pairs holds (query index into the valid columns, reference azimuth index
    in the duplicated [0, 4pi) reference); cost is path cost / path length.
    """

    pairs: np.ndarray
    local_costs: np.ndarray
    cost: float
    heading: float
    query_cols: np.ndarray
    query_elevations: np.ndarray
    matched_elevations: np.ndarray


def extract_image_skyline(
    image: np.ndarray, gradient_threshold: float = 0.1, smoothing_radius: int = 2
) -> QuerySkyline:
    """Topmost row per column whose vertical gradient magnitude (after box
    smoothing) exceeds the threshold; columns without one are invalid."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise AllColumnsInvalid("empty image")
    if smoothing_radius > 0:
        img = ndimage.uniform_filter(img, size=2 * smoothing_radius + 1, mode="nearest")
    grad = np.gradient(img, axis=0)
    exceed = np.abs(grad) > gradient_threshold
    valid = exceed.any(axis=0)
    if not valid.any():
        raise AllColumnsInvalid("no column has a vertical gradient above the threshold")
    rows = np.where(valid, np.argmax(exceed, axis=0).astype(np.float64), np.nan)
    return QuerySkyline(rows=rows, valid=valid)


def smooth_skyline(skyline: QuerySkyline, size: int = 5) -> QuerySkyline:
    """Valid-aware moving average of the boundary rows (noise suppression)."""
    if size <= 1:
        return skyline
    w = skyline.valid.astype(np.float64)
    rows = np.where(skyline.valid, skyline.rows, 0.0)
    num = ndimage.uniform_filter1d(rows, size=size, mode="nearest")
    den = ndimage.uniform_filter1d(w, size=size, mode="nearest")
    smoothed = np.where(den > 0, num / np.maximum(den, 1e-12), np.nan)
    return QuerySkyline(rows=np.where(skyline.valid, smoothed, np.nan), valid=skyline.valid)


def query_to_angles(
    skyline: QuerySkyline,
    intrinsics: CameraIntrinsics,
    tilt: float = 0.0,
    roll: float = 0.0,
) -> AngularQuery:
    """Convert boundary rows to viewing angles, compensating known tilt/roll.

    Each boundary pixel's camera ray is rotated back by the given roll and
    tilt; the result is the exact elevation angle and azimuth offset in the
    heading-only frame (for tilt = roll = 0 this inverts row =
    ppv - f tan(e)/cos(a)).
    """
    cols = np.flatnonzero(skyline.valid)
    f = intrinsics.focal_px
    d = np.stack(
        [
            (cols - intrinsics.ppu) / f,
            (skyline.rows[cols] - intrinsics.ppv) / f,
            np.ones(cols.size),
        ]
    )
    if tilt != 0.0 or roll != 0.0:
        d = _tilt_matrix(tilt).T @ _roll_matrix(roll).T @ d
    az = np.arctan2(d[0], d[2])
    elev = np.arctan2(-d[1], np.hypot(d[0], d[2]))
    return AngularQuery(cols=cols.astype(np.int64), elevations=elev, az_offsets=az)


def _local_cost_matrix(query: AngularQuery, ref_elev2: np.ndarray, ref_step: float, slope_weight):
    q_slope = np.gradient(query.elevations, query.az_offsets)
    r_slope = np.gradient(ref_elev2, ref_step)
    c = np.abs(query.elevations[:, None] - ref_elev2[None, :])
    # the first/last query samples only have one-sided slope estimates, which
    # cannot match the reference's central differences; drop their slope term
    w = np.full(query.elevations.size, slope_weight)
    w[0] = w[-1] = 0.0
    c += w[:, None] * np.abs(q_slope[:, None] - r_slope[None, :])
    return c


def _subsequence_dtw(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Open-begin / open-end DTW over the cost matrix.

    Returns (accumulated matrix D, path as (n_pairs, 2) int array). Rows are
    query samples (all consumed), columns reference samples (free endpoints).
    Steps: diagonal, vertical, horizontal.
    """
    n, m = cost.shape
    D = np.empty_like(cost)
    D[0] = cost[0]
    big = np.inf
    for i in range(1, n):
        prev = D[i - 1]
        F = np.minimum(np.concatenate(([big], prev[:-1])), prev)
        S = np.cumsum(cost[i])
        S_prev = np.concatenate(([0.0], S[:-1]))
        D[i] = S + np.minimum.accumulate(F - S_prev)

    j = int(np.argmin(D[-1]))
    i = n - 1
    path = [(i, j)]
    while i > 0:
        if j == 0:
            i -= 1
        else:
            step = int(np.argmin((D[i - 1, j - 1], D[i - 1, j], D[i, j - 1])))
            if step == 0:
                i -= 1
                j -= 1
            elif step == 1:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return D, np.asarray(path, dtype=np.int64)


def dtw_align(
    query: AngularQuery,
    reference: ReferenceSkyline,
    slope_weight: float = DEFAULT_SLOPE_WEIGHT,
) -> DtwAlignment:
    """Match the query skyline inside the circularly duplicated reference.

    Local cost blends elevation difference with slope difference; the
    returned heading is the circular mean of (reference azimuth - query
    column azimuth offset) along the path, the cost is per path step.
    """
    if query.cols.size < MIN_VALID_COLUMNS:
        raise TooFewValidColumns(
            f"need >= {MIN_VALID_COLUMNS} valid columns, got {query.cols.size}"
        )
    m = reference.azimuths.size
    ref2 = np.concatenate([reference.elevations, reference.elevations])
    cost = _local_cost_matrix(query, ref2, reference.step, slope_weight)
    D, path = _subsequence_dtw(cost)

    qi = path[:, 0]
    rj = path[:, 1]
    local = cost[qi, rj]
    theta = reference.azimuths[rj % m] - query.az_offsets[qi]
    heading = math.atan2(np.sin(theta).sum(), np.cos(theta).sum()) % (2.0 * math.pi)
    return DtwAlignment(
        pairs=path,
        local_costs=local,
        cost=float(local.sum() / len(path)),
        heading=heading,
        query_cols=query.cols[qi],
        query_elevations=query.elevations[qi],
        matched_elevations=ref2[rj],
    )


def angles_from_alignment(
    alignment: DtwAlignment, intrinsics: CameraIntrinsics
) -> tuple[float, float, float]:
    """(heading, tilt, roll) from the alignment's vertical residuals.

    Fits residual(col) = a + b (col - ppu); tilt = -a and roll = atan(b f)
    under the small-angle model; heading comes from the alignment itself.
    """
    if len(alignment.pairs) < 3:
        raise DegenerateFit("need at least 3 aligned pairs")
    cols = alignment.query_cols.astype(np.float64)
    if np.ptp(cols) < 1e-12:
        raise DegenerateFit("all aligned pairs share one column")
    resid = alignment.query_elevations - alignment.matched_elevations
    A = np.column_stack([np.ones_like(cols), cols - intrinsics.ppu])
    beta, *_ = np.linalg.lstsq(A, resid, rcond=None)
    tilt = -float(beta[0])
    roll = math.atan(float(beta[1]) * intrinsics.focal_px)
    return alignment.heading, tilt, roll


def orient_by_skyline(
    skyline: QuerySkyline,
    intrinsics: CameraIntrinsics,
    reference: ReferenceSkyline,
    slope_weight: float = DEFAULT_SLOPE_WEIGHT,
    refine_iterations: int = 6,
    tilt_search_deg: float = 4.0,
    tilt_search_step_deg: float = 1.0,
) -> tuple[float, float, float, DtwAlignment]:
    """Full skyline orientation: DTW alignment plus tilt/roll compensation.

    An uncompensated tilt lets the elastic match slide onto vertically
    similar reference stretches and bleed into an apparent roll, so a coarse
    tilt sweep first picks the compensation with the lowest alignment cost.
    From there the loop re-converts the boundary pixels with the current
    tilt/roll estimate (an exact ray rotation) and realigns; the linear
    residual fit is only the per-iteration increment. Returns
    (heading, tilt, roll, last alignment).
    """
    tilt_total = 0.0
    if tilt_search_deg > 0:
        best_cost = math.inf
        for cand in np.radians(
            np.arange(-tilt_search_deg, tilt_search_deg + 1e-9, tilt_search_step_deg)
        ):
            q = query_to_angles(skyline, intrinsics, tilt=cand, roll=0.0)
            c = dtw_align(q, reference, slope_weight).cost
            if c < best_cost:
                best_cost = c
                tilt_total = float(cand)
    roll_total = 0.0
    alignment = dtw_align(
        query_to_angles(skyline, intrinsics, tilt=tilt_total), reference, slope_weight
    )
    heading, dt, dr = angles_from_alignment(alignment, intrinsics)
    tilt_total += dt
    roll_total += dr
    for _ in range(refine_iterations):
        q = query_to_angles(skyline, intrinsics, tilt=tilt_total, roll=roll_total)
        alignment = dtw_align(q, reference, slope_weight)
        heading, dt, dr = angles_from_alignment(alignment, intrinsics)
        tilt_total += dt
        roll_total += dr
        if abs(dt) < 1e-6 and abs(dr) < 1e-6:
            break
    return heading, tilt_total, roll_total, alignment


def hog_orient(
    query_image: np.ndarray,
    strip: np.ndarray,
    strip_azimuths: np.ndarray,
    scales=(32, 48, 64),
    stride: int = 1,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Heading by multi-scale HOG patch correlation against a panorama strip.

    The query's center patch at each scale is correlated with the strip
    patch centered at every candidate azimuth column; the score curve is the
    mean correlation across scales and the heading its argmax. The strip's
    elevation range should bracket the horizon so the skyline band falls in
    the patches (orient_by_patches arranges that). Returns (heading,
    azimuths evaluated, score curve).
    """
    q = np.asarray(query_image, dtype=np.float64)
    strip = np.asarray(strip, dtype=np.float64)
    n_az = strip.shape[1]
    for s in scales:
        if q.shape[0] < s or q.shape[1] < s:
            raise QueryTooSmallForScale(f"query {q.shape} smaller than patch scale {s}")
        if strip.shape[0] < s:
            raise QueryTooSmallForScale(f"strip height {strip.shape[0]} below patch scale {s}")

    cand = np.arange(0, n_az, stride)
    scores = np.zeros((len(scales), cand.size))
    for si, s in enumerate(scales):
        qr0 = (q.shape[0] - s) // 2
        qc0 = (q.shape[1] - s) // 2
        qdesc = hog_descriptor(q[qr0 : qr0 + s, qc0 : qc0 + s])
        sr0 = (strip.shape[0] - s) // 2
        half = s // 2
        for ci, j in enumerate(cand):
            cols = np.arange(j - half, j - half + s) % n_az
            patch = strip[sr0 : sr0 + s, :][:, cols]
            scores[si, ci] = descriptor_correlation(qdesc, hog_descriptor(patch))
    curve = scores.mean(axis=0)
    best = int(np.argmax(curve))
    return float(strip_azimuths[cand[best]]), strip_azimuths[cand], curve


def orient_by_patches(
    query_image: np.ndarray,
    grid,
    cam,
    scales=(32, 48, 64),
    pixels_per_radian: float | None = None,
    azimuth_step: float = math.radians(2.0),
    max_range: float = 20_000.0,
    strip_rows: int = 96,
    max_strip_rows: int = 512,
    elevation_margin: float = math.radians(8.0),
    stride: int = 1,
    shading: str = "hypsometric",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Heading for a query image by patch correlation at a known position.

    Renders the horizon panorama to pick a strip elevation range that
    brackets the skyline everywhere, renders the cylindrical strip, and runs
    hog_orient against it. Pass the query's focal length in pixels as
    pixels_per_radian so strip columns/rows match the query's pixel scale
    (patch sizes then mean the same thing on both sides); otherwise the
    azimuth_step / strip_rows arguments are used directly.
    """
    if pixels_per_radian is not None:
        n_az = max(8, int(round(2.0 * math.pi * pixels_per_radian)))
        azimuth_step = 2.0 * math.pi / n_az
    pano = render_horizon_panorama(grid, cam, azimuth_step, max_range)
    elev_min = float(np.min(pano.elevations)) - elevation_margin
    elev_max = float(np.max(pano.elevations)) + elevation_margin
    if pixels_per_radian is not None:
        strip_rows = int(np.clip(
            round((elev_max - elev_min) * pixels_per_radian), max(scales), max_strip_rows
        ))
    strip, azimuths, _ = render_panorama_strip(
        grid, cam, azimuth_step, elev_min, elev_max, strip_rows, max_range, shading=shading
    )
    return hog_orient(query_image, strip, azimuths, scales=scales, stride=stride)
