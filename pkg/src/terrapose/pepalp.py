"""Pose refinement from 2D-3D correspondences with pose and landscape priors.

A RANSAC + DLT + Gauss-Newton initial pose feeds an iterated extended Kalman
loop: each iteration draws confidence ellipses from the current posterior,
gates and matches query keypoints against landscape landmarks under a
geometrically decaying descriptor threshold, and fuses the accepted matches
as one batch measurement. Ellipse shrinkage is emergent from the posterior
covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import rq
from scipy.spatial.distance import cdist

from .camera import (
    CameraIntrinsics,
    CameraPose,
    angles_from_rotation,
    chi2_gate,
    project_points,
    projection_jacobian,
    propagate_pose_covariance,
)
from .errors import (
    BehindCamera,
    DegenerateCoplanar,
    NoConsensus,
    NonPsdPrior,
    NoVisibleLandmarks,
    SingularInnovation,
    TooFewCorrespondences,
)
from .panorama import XyzBands

MIN_SAMPLE = 6


@dataclass(frozen=True)
class Correspondence2D3D:
    """One image point / world point pair with its gate decision."""

    uv: np.ndarray
    xyz: np.ndarray
    landmark_index: int
    query_index: int
    descriptor_distance: float
    status: str  # accepted | rejected-ellipse | rejected-threshold


@dataclass(frozen=True)
class PepAlpSchedule:
    """Iteration schedule: gate confidence, decaying descriptor threshold,
    measurement sigma and the convergence tolerance on the state change."""

    max_iterations: int = 10
    gate_confidence: float = 0.95
    descriptor_threshold: float = 0.8
    descriptor_decay: float = 0.8
    pixel_sigma: float = 1.0
    tolerance: float = 1e-4
    inner_iterations: int = 3

    def __post_init__(self):
        if not (0.0 < self.descriptor_decay < 1.0):
            raise ValueError("descriptor decay must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.pixel_sigma <= 0:
            raise ValueError("pixel_sigma must be > 0")


@dataclass
class PepAlpResult:
    pose: CameraPose
    diverged: bool
    diagnostics: list = field(default_factory=list)


def _normalize_2d(pts):
    c = pts.mean(axis=0)
    scale = math.sqrt(2.0) / max(np.linalg.norm(pts - c, axis=1).mean(), 1e-12)
    T = np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1]])
    return (pts - c) * scale, T

def _normalize_3d(pts):
    c = pts.mean(axis=0)
    scale = math.sqrt(3.0) / max(np.linalg.norm(pts - c, axis=1).mean(), 1e-12)
    U = np.eye(4)
    U[:3, :3] *= scale
    U[:3, 3] = -scale * c
    return (pts - c) * scale, U


def _dlt_projection(uv, xyz):
    """Normalized DLT estimate of the 3x4 projection matrix (or None)."""
    uvn, T = _normalize_2d(uv)
    xyzn, U = _normalize_3d(xyz)
    n = len(uv)
    A = np.zeros((2 * n, 12))
    X = np.hstack([xyzn, np.ones((n, 1))])
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -uvn[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -uvn[:, 1:2] * X
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12:
        return None
    P = np.linalg.inv(T) @ Vt[-1].reshape(3, 4) @ U
    depths = P[2] @ np.hstack([xyz, np.ones((n, 1))]).T
    if np.median(depths) < 0:
        P = -P
    return P


def _pose_from_projection(P, intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(position, angles) from a projection matrix; the DLT's implicit
    intrinsics are discarded in favor of the caller's."""
    M = P[:, :3]
    C = -np.linalg.solve(M, P[:, 3])
    K, R = rq(M)
    D = np.diag(np.sign(np.diag(K)))
    R = D @ R
    if np.linalg.det(R) < 0:
        R = -R
    return C, angles_from_rotation(R)


def _coplanarity_ratio(xyz) -> float:
    c = xyz - xyz.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return float(s[-1] / max(s[0], 1e-12))


def _gauss_newton(uv, xyz, intrinsics, state0, iterations=20):
    state = state0.copy()
    n = len(uv)
    z = uv.ravel()
    pose = CameraPose(t=state0[:3], r=state0[3:], intrinsics=intrinsics)
    J_last = None
    resid_last = None
    state_last = state
    for _ in range(iterations):
        pose = pose.with_state(state)
        h = np.empty(2 * n)
        J = np.empty((2 * n, 6))
        try:
            for i in range(n):
                h[2 * i : 2 * i + 2], J[2 * i : 2 * i + 2] = projection_jacobian(pose, xyz[i])
        except BehindCamera:
            break
        J_last, resid_last, state_last = J, z - h, state
        delta, *_ = np.linalg.lstsq(J, z - h, rcond=None)
        state = state + delta
        if np.max(np.abs(delta)) < 1e-12:
            state_last = state
            break
    if J_last is None:
        raise NoConsensus("consensus points fall behind the estimated camera")
    return state_last, J_last, resid_last


def initial_pose_ransac(
    uv: np.ndarray,
    xyz: np.ndarray,
    intrinsics: CameraIntrinsics,
    iterations: int = 500,
    inlier_tol_px: float = 3.0,
    seed: int = 0,
) -> CameraPose:
    """RANSAC over minimal DLT samples of 6, Gauss-Newton polish on the
    consensus set, covariance from the scaled normal-equation inverse.

    Deterministic for a fixed seed regardless of thread count.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = len(uv)
    if n < MIN_SAMPLE:
        raise TooFewCorrespondences(f"need >= {MIN_SAMPLE} correspondences, got {n}")
    if _coplanarity_ratio(xyz) < 1e-9:
        raise DegenerateCoplanar("world points are all coplanar")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(iterations):
        pick = rng.choice(n, size=MIN_SAMPLE, replace=False)
        if _coplanarity_ratio(xyz[pick]) < 1e-6:
            continue
        P = _dlt_projection(uv[pick], xyz[pick])
        if P is None:
            continue
        Xh = np.hstack([xyz, np.ones((n, 1))])
        proj = Xh @ P.T
        depth = proj[:, 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            pred = proj[:, :2] / depth[:, None]
        err = np.linalg.norm(pred - uv, axis=1)
        err[depth <= 0] = np.inf
        inliers = err < inlier_tol_px
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < MIN_SAMPLE:
        raise NoConsensus(f"best consensus {best_count} < {MIN_SAMPLE}")

    in_uv = uv[best_inliers]
    in_xyz = xyz[best_inliers]
    P = _dlt_projection(in_uv, in_xyz)
    if P is None:
        raise NoConsensus("DLT on the consensus set is degenerate")
    C, angles = _pose_from_projection(P, intrinsics)
    state, J, resid = _gauss_newton(in_uv, in_xyz, intrinsics, np.concatenate([C, angles]))

    dof = max(len(resid) - 6, 1)
    sigma2 = float(resid @ resid) / dof
    JtJ = J.T @ J
    try:
        cov = sigma2 * np.linalg.inv(JtJ)
    except np.linalg.LinAlgError:
        cov = sigma2 * np.linalg.pinv(JtJ)
    return CameraPose(t=state[:3], r=state[3:], intrinsics=intrinsics, covariance=cov)


def gated_match(
    pose: CameraPose,
    landmarks_xyz: np.ndarray,
    landmarks_desc: np.ndarray,
    query_uv: np.ndarray,
    query_desc: np.ndarray,
    descriptor_threshold: float,
    pixel_sigma: float = 1.0,
    gate_confidence: float = 0.95,
) -> tuple[list[Correspondence2D3D], dict]:
    """Confidence-ellipse gating plus mutual-nearest descriptor matching.

    Per landmark: build its ellipse from the pose covariance, restrict query
    keypoints to the chi-square gate, take the nearest descriptor, reject
    over-threshold distances, and enforce one-to-one by a mutual-nearest
    check. Returns (accepted correspondences, gating stats).
    """
    landmarks_xyz = np.asarray(landmarks_xyz, dtype=np.float64).reshape(-1, 3)
    query_uv = np.asarray(query_uv, dtype=np.float64).reshape(-1, 2)
    uv_pred, in_front = project_points(pose, landmarks_xyz)
    if not in_front.any():
        raise NoVisibleLandmarks("no landmark projects in front of the camera")

    n_l = len(landmarks_xyz)
    n_q = len(query_uv)
    gate = chi2_gate(gate_confidence)
    dist = cdist(np.asarray(landmarks_desc, float), np.asarray(query_desc, float))

    gated = np.zeros((n_l, n_q), dtype=bool)
    areas = []
    for k in range(n_l):
        if not in_front[k]:
            continue
        ell = propagate_pose_covariance(
            pose, landmarks_xyz[k], pixel_noise=pixel_sigma, confidence=gate_confidence
        )
        areas.append(ell.area())
        d = query_uv - ell.center
        cov = ell.covariance
        try:
            sol = np.linalg.solve(cov, d.T)
        except np.linalg.LinAlgError:
            continue
        m2 = np.einsum("ij,ji->i", d, sol)
        gated[k] = m2 <= gate

    best_q = np.full(n_l, -1, dtype=int)
    for k in range(n_l):
        js = np.flatnonzero(gated[k])
        if js.size:
            best_q[k] = js[np.argmin(dist[k, js])]

    accepted: list[Correspondence2D3D] = []
    for k in range(n_l):
        j = best_q[k]
        if j < 0:
            continue
        d_kj = dist[k, j]
        if d_kj > descriptor_threshold:
            continue
        ks = np.flatnonzero(gated[:, j])
        if ks[np.argmin(dist[ks, j])] != k:
            continue
        accepted.append(
            Correspondence2D3D(
                uv=query_uv[j],
                xyz=landmarks_xyz[k],
                landmark_index=k,
                query_index=int(j),
                descriptor_distance=float(d_kj),
                status="accepted",
            )
        )

    stats = {
        "n_in_front": int(in_front.sum()),
        "n_gated_pairs": int(gated.sum()),
        "mean_ellipse_area": float(np.mean(areas)) if areas else float("nan"),
        "n_accepted": len(accepted),
    }
    return accepted, stats


def iekf_update(
    prior: CameraPose,
    matches: list[Correspondence2D3D],
    pixel_sigma: float,
    inner_iterations: int = 3,
) -> CameraPose:
    """Iterated extended Kalman update on the stacked pixel measurements.

    Relinearizes the collinearity model inner_iterations times and forms the
    posterior covariance in Joseph form, so its trace never exceeds the
    prior's.
    """
    if not matches:
        raise ValueError("iekf_update needs at least one match")
    P0 = 0.5 * (prior.covariance + prior.covariance.T)
    if np.linalg.eigvalsh(P0).min() < -1e-9:
        raise NonPsdPrior("prior covariance is not positive semidefinite")

    m = len(matches)
    z = np.concatenate([c.uv for c in matches])
    pts = np.vstack([c.xyz for c in matches])
    R = pixel_sigma**2 * np.eye(2 * m)

    x0 = prior.state()
    xi = x0.copy()
    H = None
    K = None
    for it in range(inner_iterations):
        pose_i = prior.with_state(xi)
        h = np.empty(2 * m)
        Hi = np.empty((2 * m, 6))
        try:
            for i in range(m):
                h[2 * i : 2 * i + 2], Hi[2 * i : 2 * i + 2] = projection_jacobian(pose_i, pts[i])
        except BehindCamera:
            if it == 0:
                raise
            break
        S = Hi @ P0 @ Hi.T + R
        try:
            K = np.linalg.solve(S, Hi @ P0).T
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(str(exc)) from None
        xi = x0 + K @ (z - h - Hi @ (x0 - xi))
        H = Hi

    I_KH = np.eye(6) - K @ H
    P = I_KH @ P0 @ I_KH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    return prior.with_state(xi, covariance=P)


def pep_alp(
    prior: CameraPose,
    landmarks_xyz: np.ndarray,
    landmarks_desc: np.ndarray,
    query_uv: np.ndarray,
    query_desc: np.ndarray,
    schedule: PepAlpSchedule = PepAlpSchedule(),
) -> PepAlpResult:
    """Iterate gated matching and Kalman updates under the tightening schedule.

    Stops early when the state change drops below the tolerance or the
    accepted correspondence set repeats. If no iteration accepts any match
    the prior is returned with the diverged flag set.
    """
    pose = prior
    diverged = True
    prev_set: set | None = None
    diagnostics = []
    threshold = schedule.descriptor_threshold
    for it in range(schedule.max_iterations):
        accepted, stats = gated_match(
            pose,
            landmarks_xyz,
            landmarks_desc,
            query_uv,
            query_desc,
            descriptor_threshold=threshold,
            pixel_sigma=schedule.pixel_sigma,
            gate_confidence=schedule.gate_confidence,
        )
        record = {
            "iteration": it,
            "descriptor_threshold": threshold,
            **stats,
            "state": pose.state().tolist(),
            "covariance_trace": float(np.trace(pose.covariance)),
        }
        if accepted:
            diverged = False
            new_pose = iekf_update(
                pose, accepted, schedule.pixel_sigma, schedule.inner_iterations
            )
            change = float(np.max(np.abs(new_pose.state() - pose.state())))
            pose = new_pose
            record["state_change"] = change
            record["posterior_trace"] = float(np.trace(pose.covariance))
            diagnostics.append(record)
            pair_set = {(c.landmark_index, c.query_index) for c in accepted}
            if change < schedule.tolerance or (prev_set is not None and pair_set == prev_set):
                break
            prev_set = pair_set
        else:
            record["state_change"] = 0.0
            diagnostics.append(record)
        threshold *= schedule.descriptor_decay

    if diverged:
        return PepAlpResult(pose=prior, diverged=True, diagnostics=diagnostics)
    return PepAlpResult(pose=pose, diverged=False, diagnostics=diagnostics)


def landmarks_from_xyzbands(
    bands: XyzBands, keypoints_uv: np.ndarray, descriptors: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """3D landmarks for reference-image keypoints via their XYZ bands.

    Keypoints falling on sky pixels are dropped. Returns (xyz, descriptors).
    """
    keypoints_uv = np.asarray(keypoints_uv, dtype=np.float64).reshape(-1, 2)
    xyz = np.array([bands.lookup(u, v) for u, v in keypoints_uv])
    keep = ~np.isnan(xyz[:, 2])
    return xyz[keep], np.asarray(descriptors)[keep]
