"""Seeded synthetic experiments: mountain scenes, azimuth recovery, pose refinement.

These generators back both the test suite and the runnable scripts. Every
trial is a pure function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, CameraPose, project_points
from .errors import NoVisibleLandmarks
from .orient import QuerySkyline, ReferenceSkyline, orient_by_skyline, smooth_skyline
from .panorama import render_horizon_panorama
from .pepalp import PepAlpResult, PepAlpSchedule, pep_alp
from .terrain import DemGrid, sample_elevation


def make_mountain_dem(
    seed: int,
    n: int = 161,
    cell_size: float = 25.0,
    n_hills: int = 10,
    amp_range=(80.0, 600.0),
    sigma_range=(150.0, 700.0),
    roughness: float = 25.0,
) -> DemGrid:
    """Seeded gaussian-hill mixture plus smoothed broadband relief.

    The roughness field keeps every azimuth texture-bearing so skyline and
    patch matching fixtures are identifiable all around the horizon.
    """
    rng = np.random.default_rng(seed)
    extent = (n - 1) * cell_size
    xs = cell_size * np.arange(n)
    ys = cell_size * (n - 1 - np.arange(n))
    xx, yy = np.meshgrid(xs, ys)
    z = np.zeros((n, n))
    for _ in range(n_hills):
        cx, cy = rng.uniform(0.1 * extent, 0.9 * extent, 2)
        amp = rng.uniform(*amp_range)
        sig = rng.uniform(*sigma_range)
        z += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig**2))
    if roughness > 0:
        z += roughness * ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=2.5)
    return DemGrid(0.0, 0.0, cell_size, z)


def default_intrinsics(width: int = 400, height: int = 300, fov_deg: float = 60.0):
    focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraIntrinsics(focal_px=focal, ppu=width / 2.0, ppv=height / 2.0,
                            width=width, height=height)


def project_skyline_to_image(
    pano_dense, pose: CameraPose
) -> np.ndarray:
    """Apparent skyline row per pixel column by projecting the dense horizon
    polyline through the pose. Columns without coverage are NaN."""
    dirs = np.column_stack(
        [
            np.sin(pano_dense.azimuths) * np.cos(pano_dense.elevations),
            np.cos(pano_dense.azimuths) * np.cos(pano_dense.elevations),
            np.sin(pano_dense.elevations),
        ]
    )
    pts = pose.t[None, :] + 1000.0 * dirs
    uv, in_front = project_points(pose, pts)
    w = pose.intrinsics.width
    rows = np.full(w, np.nan)
    ok = in_front & np.isfinite(uv[:, 0]) & (uv[:, 0] > -w) & (uv[:, 0] < 2 * w)
    if ok.sum() < 2:
        return rows
    u = uv[ok, 0]
    v = uv[ok, 1]
    order = np.argsort(u)
    u, v = u[order], v[order]
    cols = np.arange(w, dtype=np.float64)
    inside = (cols >= u[0]) & (cols <= u[-1])
    rows[inside] = np.interp(cols[inside], u, v)
    return rows


@dataclass
class AzimuthTrial:
    true_heading: float
    est_heading: float
    dtw_cost: float

    @property
    def heading_error_deg(self) -> float:
        d = (self.est_heading - self.true_heading + math.pi) % (2 * math.pi) - math.pi
        return abs(math.degrees(d))


def azimuth_recovery_trial(
    seed: int,
    skyline_noise_deg: float = 0.3,
    dropout: float = 0.2,
    reference_step_deg: float = 0.5,
    max_range: float = 3000.0,
) -> AzimuthTrial:
    """One synthetic azimuth-recovery run: render a mountain skyline at a
    random pose, perturb it, and recover the heading by DTW."""
    rng = np.random.default_rng(seed)
    grid = make_mountain_dem(seed)
    extent = (grid.n_cols - 1) * grid.cell_size
    cx = rng.uniform(0.35 * extent, 0.65 * extent)
    cy = rng.uniform(0.35 * extent, 0.65 * extent)
    cz = sample_elevation(grid, cx, cy) + 2.0

    intr = default_intrinsics()
    heading = rng.uniform(0.0, 2 * math.pi)
    tilt = math.radians(rng.uniform(-2.0, 2.0))
    roll = math.radians(rng.uniform(-2.0, 2.0))
    pose = CameraPose(t=(cx, cy, cz), r=(heading, tilt, roll), intrinsics=intr)

    dense = render_horizon_panorama(grid, pose.t, math.radians(0.25), max_range)
    rows = project_skyline_to_image(dense, pose)
    valid = ~np.isnan(rows)
    # angular noise applied on the boundary angle, then mapped back to rows
    cols = np.arange(intr.width)
    alpha = np.arctan((cols - intr.ppu) / intr.focal_px)
    elev = np.arctan((intr.ppv - rows) * np.cos(alpha) / intr.focal_px)
    elev = elev + np.radians(skyline_noise_deg) * rng.standard_normal(intr.width)
    rows_noisy = intr.ppv - intr.focal_px * np.tan(elev) / np.cos(alpha)
    valid &= rng.uniform(size=intr.width) >= dropout

    skyline = smooth_skyline(
        QuerySkyline(rows=np.where(valid, rows_noisy, np.nan), valid=valid), size=5
    )
    reference = ReferenceSkyline.from_panorama(
        render_horizon_panorama(grid, pose.t, math.radians(reference_step_deg), max_range)
    )
    # heading-only regime: no tilt sweep, heading straight from the alignment
    est_heading, _, _, alignment = orient_by_skyline(
        skyline, intr, reference, refine_iterations=0, tilt_search_deg=0.0
    )
    return AzimuthTrial(true_heading=heading, est_heading=est_heading,
                        dtw_cost=alignment.cost)


def _unit_descriptors(rng, n, dim):
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class PepAlpTrial:
    position_error_m: float
    heading_error_deg: float
    diverged: bool
    traces_monotone: bool
    final_distance_to_truth_m: float


def pepalp_trial(
    seed: int,
    prior_offset_m: float = 200.0,
    prior_heading_offset_deg: float = 3.0,
    n_landmarks: int = 60,
    keypoint_noise_px: float = 1.0,
    outlier_fraction: float = 0.3,
    scramble_all: bool = False,
    aim_prior_at_scene: bool = False,
    descriptor_dim: int = 32,
    schedule: PepAlpSchedule | None = None,
) -> PepAlpTrial:
    """One synthetic refinement run on a mountain scene.

    Landmarks are terrain surface points in the true view with unit-norm
    descriptors; query keypoints are their noisy projections. A fraction of
    the query descriptors (or all, for the failure-regime check) are
    scrambled. The prior pose is offset from the truth with a covariance
    sized to the nominal (not the actual) offset; for far-offset failure
    trials aim_prior_at_scene points the prior heading at the landmark
    centroid, the plausible way a user mislocates a photo. A
    NoVisibleLandmarks propagation counts as a diverged outcome.
    """
    rng = np.random.default_rng(seed)
    grid = make_mountain_dem(seed + 10_000)
    extent = (grid.n_cols - 1) * grid.cell_size
    cx = rng.uniform(0.4 * extent, 0.6 * extent)
    cy = rng.uniform(0.4 * extent, 0.6 * extent)
    cz = sample_elevation(grid, cx, cy) + 2.0
    intr = default_intrinsics(width=1000, height=750, fov_deg=60.0)
    heading = rng.uniform(0.0, 2 * math.pi)
    true_pose = CameraPose(
        t=(cx, cy, cz), r=(heading, math.radians(rng.uniform(-1, 1)), 0.0), intrinsics=intr
    )

    # terrain surface landmarks inside the view frustum
    xyz = []
    half_fov = math.atan((intr.width / 2) / intr.focal_px)
    while len(xyz) < n_landmarks:
        alpha = rng.uniform(-0.85 * half_fov, 0.85 * half_fov)
        rho = rng.uniform(150.0, 2500.0)
        px = cx + rho * math.sin(heading + alpha)
        py = cy + rho * math.cos(heading + alpha)
        if not grid.contains(px, py):
            continue
        pz = sample_elevation(grid, px, py)
        uv, in_front = project_points(true_pose, np.array([[px, py, pz]]))
        if not in_front[0]:
            continue
        u, v = uv[0]
        if 20 <= u <= intr.width - 20 and 20 <= v <= intr.height - 20:
            xyz.append((px, py, pz))
    xyz = np.asarray(xyz)

    l_desc = _unit_descriptors(rng, n_landmarks, descriptor_dim)
    uv_true, _ = project_points(true_pose, xyz)
    q_uv = uv_true + keypoint_noise_px * rng.standard_normal(uv_true.shape)
    q_desc = l_desc + 0.05 * rng.standard_normal(l_desc.shape)
    q_desc /= np.linalg.norm(q_desc, axis=1, keepdims=True)
    if scramble_all:
        q_desc = _unit_descriptors(rng, n_landmarks, descriptor_dim)
    else:
        n_out = int(round(outlier_fraction * n_landmarks))
        idx = rng.choice(n_landmarks, size=n_out, replace=False)
        q_desc[idx] = _unit_descriptors(rng, n_out, descriptor_dim)

    # prior: offset position and heading; covariance matches the nominal
    # 200 m / 3 deg operating regime even when the true offset is larger
    direction = rng.uniform(0.0, 2 * math.pi)
    off = prior_offset_m
    d_heading = math.radians(prior_heading_offset_deg) * rng.choice([-1.0, 1.0])
    prior_t = np.array(
        [cx + off * math.sin(direction), cy + off * math.cos(direction), cz + rng.uniform(-10, 10)]
    )
    if aim_prior_at_scene:
        centroid = xyz.mean(axis=0)
        prior_heading = math.atan2(centroid[0] - prior_t[0], centroid[1] - prior_t[1]) + d_heading
    else:
        prior_heading = heading + d_heading
    prior_r = np.array(
        [prior_heading, true_pose.r[1] + math.radians(rng.uniform(-0.5, 0.5)), 0.0]
    )
    sig_pos = min(max(prior_offset_m, 1.0), 200.0)
    sig_ang = math.radians(max(prior_heading_offset_deg, 0.5))
    cov = np.diag([sig_pos**2] * 3 + [sig_ang**2] * 3)
    prior = CameraPose(t=prior_t, r=prior_r, intrinsics=intr, covariance=cov)

    sched = schedule or PepAlpSchedule(
        max_iterations=15,
        descriptor_threshold=0.7,
        descriptor_decay=0.85,
        pixel_sigma=max(keypoint_noise_px, 0.5),
        tolerance=1e-4,
        inner_iterations=8,
    )
    try:
        result = pep_alp(prior, xyz, l_desc, q_uv, q_desc, sched)
    except NoVisibleLandmarks:
        result = PepAlpResult(pose=prior, diverged=True, diagnostics=[])

    traces = [d["covariance_trace"] for d in result.diagnostics if "posterior_trace" in d]
    posts = [d["posterior_trace"] for d in result.diagnostics if "posterior_trace" in d]
    monotone = all(p <= t + 1e-9 for t, p in zip(traces, posts))

    pos_err = float(np.linalg.norm(result.pose.t - true_pose.t))
    dh = (result.pose.heading - heading + math.pi) % (2 * math.pi) - math.pi
    return PepAlpTrial(
        position_error_m=pos_err,
        heading_error_deg=abs(math.degrees(dh)),
        diverged=result.diverged,
        traces_monotone=monotone,
        final_distance_to_truth_m=pos_err,
    )


def random_fusion_instance(seed: int, max_proposals: int = 12):
    """Seeded random proposal set and priors for the selection solvers."""
    from .geofuse import FusionPriors, GeoDetection, SpacingHistogram

    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_proposals + 1))
    pts = rng.uniform(0.0, 40.0, (n, 2))
    proposals = [
        GeoDetection(
            easting=float(x),
            northing=float(y),
            per_view_scores={},
            combined_score=float(rng.uniform(0.05, 0.95)),
            radius=float(rng.uniform(0.5, 2.0)),
        )
        for x, y in pts
    ]
    probs = rng.uniform(0.2, 1.0, 30)
    probs /= probs.sum()
    priors = FusionPriors(
        spacing=SpacingHistogram(bin_width=2.0, probs=probs, floor=float(probs.min()) / 2),
        w_spacing=float(rng.uniform(0.0, 0.5)),
        w_road=0.0,
        detection_threshold=float(rng.uniform(0.3, 0.6)),
    )
    return proposals, priors
