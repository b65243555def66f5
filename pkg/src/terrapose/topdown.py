"""Ground-panorama geometry: bird's-eye warping, aerial registration, change scoring.

An equirectangular street panorama is warped to a camera-centered top-down
view under the flat-ground assumption, localized inside an aerial tile by
descriptor matching plus RANSAC homography, and compared tile-by-tile with
robust-standardized normalized cross-correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    FootprintOutsideAerial,
    NoConsensus,
    NonPositiveHeight,
    TooFewMatches,
)
from .features import harris_keypoints, match_knn, multiscale_hog  # noqa: F401  (match_knn re-exported)

DEFAULT_EXTENT_M = 150.0
MIN_DEPRESSION_DEG = 5.0

SCENE_CLASSES = ("urban", "rural")


@dataclass(frozen=True)
class PanoramaImage:
    """Equirectangular ground panorama: width = 2 x height, rows span
    elevation +90..-90 deg, column 0 looks along heading_col0."""

    raster: np.ndarray
    heading_col0: float = 0.0
    cam_height: float = 2.5

    def __post_init__(self):
        r = np.asarray(self.raster, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != 2 * r.shape[0]:
            raise ValueError(f"equirectangular raster must be H x 2H, got {r.shape}")
        if self.cam_height <= 0:
            raise NonPositiveHeight(f"camera height must be > 0, got {self.cam_height}")
        object.__setattr__(self, "raster", r)


@dataclass(frozen=True)
class TopDownView:
    """Square camera-centered ground raster; NaN cells are beyond the
    usable depression angle."""

    raster: np.ndarray
    gsd: float
    extent: float
    north_up: bool = True


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3).copy()
        if abs(H[2, 2]) > 1e-15:
            H = H / H[2, 2]
        if abs(np.linalg.det(H)) <= 1e-12:
            raise ValueError("homography is not invertible")
        H.flags.writeable = False
        object.__setattr__(self, "matrix", H)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        ph = np.hstack([pts, np.ones((len(pts), 1))])
        q = ph @ self.matrix.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class TileScore:
    row: int
    col: int
    r: float
    z: float
    changed: bool
    degenerate: bool = False


@dataclass(frozen=True)
class ChangeThresholds:
    r_min: float
    z_min: float = -2.0
    flagged_fraction: float = 0.25


# placeholder defaults, re-fit on fixtures rather than ground truth
CLASS_THRESHOLDS = {
    "rural": ChangeThresholds(r_min=0.35),
    "urban": ChangeThresholds(r_min=0.20),
}


@dataclass
class ChangeReport:
    tiles: list
    scene_class: str
    changed_fraction: float
    scene_changed: bool
    n_degenerate: int = 0


def pano_sampling_coords(pano: PanoramaImage, dx, dy):
    """Fractional panorama (col, row) sampling coordinates for ground offsets.

    azimuth = atan2(dx, dy) corrected by the heading of column 0; depression
    = atan(h / ground distance). Pixel centers follow the half-pixel
    convention.
    """
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    h, w = pano.raster.shape
    azimuth = np.arctan2(dx, dy)
    depression = np.arctan2(pano.cam_height, np.hypot(dx, dy))
    col = ((azimuth - pano.heading_col0) % (2.0 * math.pi)) / (2.0 * math.pi) * w - 0.5
    row = (math.pi / 2.0 + depression) / math.pi * h - 0.5
    return col, row


def _bilinear_wrap_cols(img: np.ndarray, col, row):
    h, w = img.shape
    c0 = np.floor(col).astype(np.intp)
    fc = col - c0
    r0 = np.clip(np.floor(row).astype(np.intp), 0, h - 2)
    fr = np.clip(row - r0, 0.0, 1.0)
    c0m = np.mod(c0, w)
    c1m = np.mod(c0 + 1, w)
    top = img[r0, c0m] * (1 - fc) + img[r0, c1m] * fc
    bot = img[r0 + 1, c0m] * (1 - fc) + img[r0 + 1, c1m] * fc
    return top * (1 - fr) + bot * fr


def pano_to_topdown(
    pano: PanoramaImage,
    gsd: float,
    extent: float = DEFAULT_EXTENT_M,
    min_depression_deg: float = MIN_DEPRESSION_DEG,
) -> TopDownView:
    """Inverse perspective map of the panorama onto flat ground.

    Cells whose depression angle falls below min_depression_deg are NaN (the
    far field is too distorted to compare). Default extent is a 150 m tile.
    """
    if pano.cam_height <= 0:
        raise NonPositiveHeight(f"camera height must be > 0, got {pano.cam_height}")
    if extent / 2.0 < gsd:
        raise ValueError(f"extent {extent} too small for gsd {gsd}")
    n = int(round(extent / gsd))
    idx = np.arange(n, dtype=np.float64)
    dx = (idx - (n - 1) / 2.0) * gsd
    dy = ((n - 1) / 2.0 - idx) * gsd
    dxx, dyy = np.meshgrid(dx, dy)
    col, row = pano_sampling_coords(pano, dxx, dyy)
    out = _bilinear_wrap_cols(pano.raster, col, row)
    depression = np.arctan2(pano.cam_height, np.hypot(dxx, dyy))
    out = np.where(depression >= math.radians(min_depression_deg), out, np.nan)
    return TopDownView(raster=out, gsd=gsd, extent=n * gsd)


def detect_and_describe(
    raster: np.ndarray,
    scales=(16, 24, 32),
    response_threshold: float = 0.01,
    max_keypoints: int = 400,
):
    """Harris-style corners with multi-scale HOG descriptors.

    Returns (keypoints (n, 2) as (u, v), descriptors (n, d)).
    """
    img = np.nan_to_num(np.asarray(raster, dtype=np.float64), nan=0.0)
    kp = harris_keypoints(
        img, response_threshold=response_threshold, max_keypoints=max_keypoints
    )
    desc = multiscale_hog(img, kp, scales)
    return kp, desc


def _normalize_pts(pts):
    c = pts.mean(axis=0)
    scale = math.sqrt(2.0) / max(np.linalg.norm(pts - c, axis=1).mean(), 1e-12)
    T = np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1.0]])
    return (pts - c) * scale, T


def _homography_dlt(src, dst):
    srcn, Ts = _normalize_pts(src)
    dstn, Td = _normalize_pts(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = srcn[:, 0], srcn[:, 1]
    u, v = dstn[:, 0], dstn[:, 1]
    A[0::2] = np.column_stack(
        [x, y, np.ones(n), np.zeros(n), np.zeros(n), np.zeros(n), -u * x, -u * y, -u]
    )
    A[1::2] = np.column_stack(
        [np.zeros(n), np.zeros(n), np.zeros(n), -x, -y, -np.ones(n), v * x, v * y, v]
    )
    _, s, Vt = np.linalg.svd(A)
    if n > 4 and s[-2] < 1e-12:
        return None
    H = Vt[-1].reshape(3, 3)
    if abs(H[2, 2]) < 1e-12:
        return None
    H = np.linalg.inv(Td) @ H @ Ts
    if abs(np.linalg.det(H)) < 1e-12:
        return None
    return H / H[2, 2]


def _symmetric_transfer_error(H, src, dst):
    Hf = Homography(H)
    fwd = Hf.apply(src) - dst
    bwd = Hf.inverse().apply(dst) - src
    return np.sqrt((fwd**2).sum(axis=1) + (bwd**2).sum(axis=1))


def ransac_homography(
    matches: np.ndarray,
    iterations: int = 1000,
    inlier_tol_px: float = 3.0,
    seed: int = 0,
) -> tuple[Homography, np.ndarray]:
    """Minimal 4-point normalized DLT inside a seeded RANSAC loop.

    matches rows are (uA, vA, uB, vB); consensus is by symmetric transfer
    error; the final model is re-estimated on all inliers of the best
    hypothesis (earliest hypothesis wins ties). Returns (H, inlier mask).
    """
    matches = np.asarray(matches, dtype=np.float64).reshape(-1, 4)
    n = len(matches)
    if n < 4:
        raise TooFewMatches(f"need >= 4 matches, got {n}")
    src = matches[:, :2]
    dst = matches[:, 2:]

    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(iterations):
        pick = rng.choice(n, size=4, replace=False)
        H = _homography_dlt(src[pick], dst[pick])
        if H is None:
            continue
        try:
            err = _symmetric_transfer_error(H, src, dst)
        except ValueError:
            continue
        inliers = err < inlier_tol_px
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < 4:
        raise NoConsensus(f"best consensus {best_count} < 4")

    H = _homography_dlt(src[best_inliers], dst[best_inliers])
    if H is None:
        raise NoConsensus("final re-estimation degenerate")
    return Homography(H), best_inliers


def register_crop(
    topdown: TopDownView,
    aerial: np.ndarray,
    H: Homography,
    min_coverage: float = 0.10,
):
    """Locate the top-down view inside the aerial raster via H (top-down
    pixels to aerial pixels).

    Returns (crop raster, (row0, col0) crop offset, footprint polygon (4, 2)
    in aerial pixel coordinates, coverage fraction of the footprint bbox
    inside the aerial bounds).
    """
    h, w = topdown.raster.shape
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    poly = H.apply(corners)
    ah, aw = np.asarray(aerial).shape[:2]
    x0, y0 = poly.min(axis=0)
    x1, y1 = poly.max(axis=0)
    cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
    cx1, cy1 = min(x1, float(aw)), min(y1, float(ah))
    area = max(x1 - x0, 1e-12) * max(y1 - y0, 1e-12)
    clipped = max(cx1 - cx0, 0.0) * max(cy1 - cy0, 0.0)
    coverage = clipped / area
    if coverage < min_coverage:
        raise FootprintOutsideAerial(
            f"footprint coverage {coverage:.3f} below {min_coverage}"
        )
    r0, r1 = int(math.floor(cy0)), int(math.ceil(cy1))
    c0, c1 = int(math.floor(cx0)), int(math.ceil(cx1))
    crop = np.asarray(aerial)[r0:r1, c0:c1]
    return crop, (r0, c0), poly, coverage


def _tile_ncc(a: np.ndarray, b: np.ndarray):
    a = a - a.mean()
    b = b - b.mean()
    na = np.sqrt((a**2).sum())
    nb = np.sqrt((b**2).sum())
    if na < 1e-12 or nb < 1e-12:
        return None
    return float((a * b).sum() / (na * nb))


def change_zscore(
    region_a: np.ndarray,
    region_b: np.ndarray,
    tile_size: int,
    scene_class: str,
    thresholds: ChangeThresholds | None = None,
) -> ChangeReport:
    """Per-tile zero-mean NCC with robust z-standardization.

    z = (r - median(r)) / (1.4826 MAD); a tile is flagged when r < r_min or
    z < z_min for its scene class, the scene verdict when the flagged
    fraction exceeds the class threshold. Zero-variance tiles are excluded
    from the statistics and reported as degenerate.
    """
    a = np.asarray(region_a, dtype=np.float64)
    b = np.asarray(region_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"regions differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] % tile_size or a.shape[1] % tile_size:
        raise ValueError(f"tile size {tile_size} does not divide region {a.shape}")
    if scene_class not in SCENE_CLASSES:
        raise ValueError(f"scene class must be one of {SCENE_CLASSES}")
    th = thresholds or CLASS_THRESHOLDS[scene_class]

    rows = a.shape[0] // tile_size
    cols = a.shape[1] // tile_size
    rs = np.full((rows, cols), np.nan)
    for i in range(rows):
        for j in range(cols):
            sl = (slice(i * tile_size, (i + 1) * tile_size),
                  slice(j * tile_size, (j + 1) * tile_size))
            r = _tile_ncc(a[sl], b[sl])
            if r is not None:
                rs[i, j] = r

    valid = ~np.isnan(rs)
    med = float(np.median(rs[valid])) if valid.any() else 0.0
    mad = float(np.median(np.abs(rs[valid] - med))) if valid.any() else 0.0
    denom = max(1.4826 * mad, 1e-12)

    tiles = []
    flagged = 0
    for i in range(rows):
        for j in range(cols):
            if np.isnan(rs[i, j]):
                tiles.append(TileScore(i, j, float("nan"), float("nan"), False, True))
                continue
            z = (rs[i, j] - med) / denom
            ch = bool(rs[i, j] < th.r_min or z < th.z_min)
            flagged += ch
            tiles.append(TileScore(i, j, float(rs[i, j]), float(z), ch))

    n_valid = int(valid.sum())
    frac = flagged / n_valid if n_valid else 0.0
    return ChangeReport(
        tiles=tiles,
        scene_class=scene_class,
        changed_fraction=frac,
        scene_changed=frac > th.flagged_fraction,
        n_degenerate=int((~valid).sum()),
    )
