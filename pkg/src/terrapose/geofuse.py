"""Late fusion of per-view detections in geographic coordinates.

Detections from street panoramas and orthophotos are projected to ground
points (flat-terrain, known camera height), merged into a multi-view
proposal set, re-scored in every view, and selected by minimizing an energy
with unary detection terms, a learned spacing prior and a road-distance
prior. A greedy solver does the work; exhaustive enumeration on small
instances is the oracle.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform

from .errors import (
    AtOrAboveHorizon,
    EmptyInput,
    TooFewPositions,
    TooManyProposals,
)

MIN_DEPRESSION_DEG = 0.5
NEUTRAL_SCORE = 0.5  # log-odds zero marker for out-of-frame views
DEFAULT_MERGE_RADIUS_M = 2.0
DEFAULT_FOOTPRINT_RADIUS_M = 1.0
_EPS = 1e-6


@dataclass(frozen=True)
class ViewDetection:
    view_id: str
    bbox: tuple  # (u_min, v_min, u_max, v_max) pixels
    score: float

    def __post_init__(self):
        u0, v0, u1, v1 = self.bbox
        if not (u1 > u0 and v1 > v0):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class PanoView:
    """Street-panorama view geometry: equirectangular W x H image at a
    ground position with known camera height."""

    view_id: str
    easting: float
    northing: float
    cam_height: float
    heading_col0: float
    width: int
    height: int


@dataclass(frozen=True)
class OrthoView:
    """Orthophoto view: affine geo-transform (E, N) = A @ (u, v, 1)."""

    view_id: str
    transform: np.ndarray  # (2, 3): [[a, b, c], [d, e, f]]
    width: int
    height: int

    def __post_init__(self):
        T = np.asarray(self.transform, dtype=np.float64).reshape(2, 3)
        if abs(np.linalg.det(T[:, :2])) < 1e-12:
            raise ValueError("ortho geo-transform is not invertible")
        object.__setattr__(self, "transform", T)

    def pixel_to_geo(self, u, v):
        T = self.transform
        return T[0, 0] * u + T[0, 1] * v + T[0, 2], T[1, 0] * u + T[1, 1] * v + T[1, 2]

    def geo_to_pixel(self, e, n):
        T = self.transform
        rhs = np.array([e - T[0, 2], n - T[1, 2]])
        uv = np.linalg.solve(T[:, :2], rhs)
        return float(uv[0]), float(uv[1])


@dataclass
class GeoDetection:
    easting: float
    northing: float
    per_view_scores: dict
    combined_score: float
    radius: float = DEFAULT_FOOTPRINT_RADIUS_M
    member_views: tuple = ()


@dataclass(frozen=True)
class SpacingHistogram:
    """Laplace-smoothed distribution over nearest-neighbor distances."""

    bin_width: float
    probs: np.ndarray
    floor: float

    def prob(self, distance: float) -> float:
        idx = int(distance / self.bin_width)
        if 0 <= idx < len(self.probs):
            return float(self.probs[idx])
        return self.floor

    @classmethod
    def uniform(cls, bin_width: float = 1.0, n_bins: int = 50) -> "SpacingHistogram":
        p = np.full(n_bins, 1.0 / n_bins)
        return cls(bin_width=bin_width, probs=p, floor=1.0 / n_bins)


@dataclass(frozen=True)
class RoadDistanceRaster:
    """Meters-to-road-edge per cell on a regular geographic grid."""

    origin_easting: float
    origin_northing: float
    cell_size: float
    values: np.ndarray  # (rows, cols), row 0 = north

    def lookup(self, e: float, n: float) -> float | None:
        col = int(round((e - self.origin_easting) / self.cell_size))
        row = int(round(
            (self.origin_northing + (self.values.shape[0] - 1) * self.cell_size - n)
            / self.cell_size
        ))
        if 0 <= row < self.values.shape[0] and 0 <= col < self.values.shape[1]:
            return float(self.values[row, col])
        return None


@dataclass
class FusionPriors:
    spacing: SpacingHistogram = field(default_factory=SpacingHistogram.uniform)
    road_histogram: SpacingHistogram = field(default_factory=SpacingHistogram.uniform)
    road_raster: RoadDistanceRaster | None = None
    w_spacing: float = 0.0
    w_road: float = 0.0
    detection_threshold: float = 0.5

    @classmethod
    def flat(cls, detection_threshold: float = 0.5) -> "FusionPriors":
        return cls(detection_threshold=detection_threshold)


def _logit(p: float) -> float:
    p = min(max(p, _EPS), 1.0 - _EPS)
    return math.log(p / (1.0 - p))


def det_to_geo(det: ViewDetection, view) -> tuple[float, float]:
    """Ground point of a detection: flat-terrain ray drop for panoramas,
    affine center mapping for orthophotos."""
    u_c = (det.bbox[0] + det.bbox[2]) / 2.0
    if isinstance(view, OrthoView):
        v_c = (det.bbox[1] + det.bbox[3]) / 2.0
        return view.pixel_to_geo(u_c, v_c)
    v_b = det.bbox[3]  # bbox bottom row
    azimuth = view.heading_col0 + u_c / view.width * 2.0 * math.pi
    depression = v_b / view.height * math.pi - math.pi / 2.0
    if depression <= math.radians(MIN_DEPRESSION_DEG):
        raise AtOrAboveHorizon(
            f"bbox bottom depression {math.degrees(depression):.2f} deg at or above horizon"
        )
    ground_range = view.cam_height / math.tan(depression)
    return (
        view.easting + ground_range * math.sin(azimuth),
        view.northing + ground_range * math.cos(azimuth),
    )


def geo_to_view_pixel(view, e: float, n: float):
    """Back-projection of a ground point into a view; None when out of frame."""
    if isinstance(view, OrthoView):
        u, v = view.geo_to_pixel(e, n)
        if 0.0 <= u < view.width and 0.0 <= v < view.height:
            return u, v
        return None
    dx = e - view.easting
    dy = n - view.northing
    rho = math.hypot(dx, dy)
    depression = math.atan2(view.cam_height, rho)
    if depression <= math.radians(MIN_DEPRESSION_DEG):
        return None
    azimuth = math.atan2(dx, dy)
    u = ((azimuth - view.heading_col0) % (2.0 * math.pi)) / (2.0 * math.pi) * view.width
    v = (depression + math.pi / 2.0) / math.pi * view.height
    return u, min(v, view.height - _EPS)


def _read_score(score_map: np.ndarray, u: float, v: float) -> float:
    h, w = score_map.shape
    c = min(max(u, 0.0), w - 1.0)
    r = min(max(v, 0.0), h - 1.0)
    c0 = min(int(c), w - 2) if w > 1 else 0
    r0 = min(int(r), h - 2) if h > 1 else 0
    fc = c - c0
    fr = r - r0
    c1 = min(c0 + 1, w - 1)
    r1 = min(r0 + 1, h - 1)
    return float(
        score_map[r0, c0] * (1 - fr) * (1 - fc)
        + score_map[r0, c1] * (1 - fr) * fc
        + score_map[r1, c0] * fr * (1 - fc)
        + score_map[r1, c1] * fr * fc
    )


def union_and_rescore(
    detections: list,
    views: dict,
    score_maps: dict,
    merge_radius: float = DEFAULT_MERGE_RADIUS_M,
    footprint_radius: float = DEFAULT_FOOTPRINT_RADIUS_M,
) -> list[GeoDetection]:
    """Project all detections to ground, merge within the merge radius
    (single linkage), and re-score every proposal in every view.

    A view where the proposal is out of frame records the neutral 0.5
    marker and is excluded from the combined score, which is the sigmoid of
    the mean log-odds over in-frame views.
    """
    if not detections:
        raise EmptyInput("no detections to fuse")
    pts = []
    src_views = []
    for det in detections:
        if det.view_id not in views:
            raise EmptyInput(f"no view geometry for '{det.view_id}'")
        try:
            pts.append(det_to_geo(det, views[det.view_id]))
            src_views.append(det.view_id)
        except AtOrAboveHorizon:
            continue
    if not pts:
        raise EmptyInput("every detection projects at or above the horizon")
    pts = np.asarray(pts)

    n = len(pts)
    if n == 1:
        labels = np.zeros(1, dtype=int)
        n_clusters = 1
    else:
        d = squareform(pdist(pts))
        adj = csr_matrix(d <= merge_radius)
        n_clusters, labels = connected_components(adj, directed=False)

    proposals = []
    for c in range(n_clusters):
        members = labels == c
        e, nn = pts[members].mean(axis=0)
        per_view = {}
        logits = []
        for vid, view in views.items():
            pix = geo_to_view_pixel(view, e, nn)
            if pix is None:
                per_view[vid] = NEUTRAL_SCORE
                continue
            s = _read_score(score_maps[vid], *pix)
            per_view[vid] = s
            logits.append(_logit(s))
        combined = 1.0 / (1.0 + math.exp(-np.mean(logits))) if logits else NEUTRAL_SCORE
        proposals.append(
            GeoDetection(
                easting=float(e),
                northing=float(nn),
                per_view_scores=per_view,
                combined_score=float(combined),
                radius=footprint_radius,
                member_views=tuple(sorted({src_views[i] for i in np.flatnonzero(members)})),
            )
        )
    return proposals


def fusion_energy(selection, proposals: list, priors: FusionPriors) -> float:
    """Energy of a proposal subset: thresholded unary score terms, spacing
    prior on nearest selected neighbors, road-distance prior per proposal.

    Selected pairs closer than the sum of their footprint radii cost
    +infinity (hard non-overlap). Empty selection has energy 0. Proposals
    outside the road raster use the histogram floor (max-distance bin) with
    a warning.
    """
    sel = sorted(set(selection))
    if not sel:
        return 0.0
    pts = np.array([[proposals[i].easting, proposals[i].northing] for i in sel])
    radii = np.array([proposals[i].radius for i in sel])

    if len(sel) > 1:
        d = squareform(pdist(pts))
        np.fill_diagonal(d, np.inf)
        excl = radii[:, None] + radii[None, :]
        if np.any(d < excl):
            return math.inf

    energy = 0.0
    thr_logit = _logit(priors.detection_threshold)
    for k, i in enumerate(sel):
        energy -= _logit(proposals[i].combined_score) - thr_logit
        if priors.w_spacing > 0.0 and len(sel) > 1:
            nn_dist = float(np.min(d[k]))
            energy += priors.w_spacing * -math.log(max(priors.spacing.prob(nn_dist), 1e-300))
        if priors.w_road > 0.0 and priors.road_raster is not None:
            dist = priors.road_raster.lookup(proposals[i].easting, proposals[i].northing)
            if dist is None:
                warnings.warn(
                    f"proposal {i} outside road raster; using max-distance bin",
                    stacklevel=2,
                )
                p = priors.road_histogram.floor
            else:
                p = priors.road_histogram.prob(dist)
            energy += priors.w_road * -math.log(max(p, 1e-300))
    return energy


def solve_greedy(proposals: list, priors: FusionPriors) -> tuple[list, float]:
    """Greedy energy descent: repeatedly add the proposal with the largest
    energy decrease; candidates below the detection threshold are never
    added; ties break toward the lower index. Returns (indices, energy)."""
    selected: list[int] = []
    energy = 0.0
    candidates = [
        i for i, p in enumerate(proposals) if p.combined_score >= priors.detection_threshold
    ]
    while candidates:
        best_i = None
        best_e = energy
        for i in candidates:
            e = fusion_energy(selected + [i], proposals, priors)
            if e < best_e - 1e-12:
                best_e = e
                best_i = i
        if best_i is None:
            break
        selected.append(best_i)
        candidates.remove(best_i)
        energy = best_e
    return sorted(selected), energy


def solve_exact(proposals: list, priors: FusionPriors, max_n: int = 20) -> tuple[list, float]:
    """Exhaustive subset enumeration minimizing fusion_energy (the oracle
    for solve_greedy); lexicographically first among ties."""
    n = len(proposals)
    if n > max_n:
        raise TooManyProposals(f"{n} proposals exceed the exact-solver cap {max_n}")
    best_sel: list[int] = []
    best_e = 0.0
    for k in range(1, n + 1):
        for combo in itertools.combinations(range(n), k):
            e = fusion_energy(combo, proposals, priors)
            if e < best_e - 1e-12:
                best_e = e
                best_sel = list(combo)
    return best_sel, best_e


def learn_spacing_histogram(
    positions: np.ndarray, bin_width: float = 1.0, n_bins: int | None = None
) -> SpacingHistogram:
    """Histogram of nearest-neighbor distances, add-one smoothed, normalized."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(positions)
    if n < 2:
        raise TooFewPositions(f"need >= 2 positions, got {n}")
    dd, _ = cKDTree(positions).query(positions, k=2)
    nn = dd[:, 1]
    idx = np.floor(nn / bin_width).astype(int)
    if n_bins is None:
        n_bins = int(idx.max()) + 1
    counts = np.bincount(np.clip(idx, 0, n_bins - 1), minlength=n_bins).astype(np.float64)
    total = n + n_bins
    probs = (counts + 1.0) / total
    return SpacingHistogram(bin_width=bin_width, probs=probs, floor=1.0 / total)
