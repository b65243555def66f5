"""Pinhole camera model: rotations, collinearity projection, FOV, covariance propagation.

Conventions (single source of truth for the whole package):
  * world frame is local ENU meters (x east, y north, z up);
  * camera frame is x right, y down, z forward along the optical axis;
  * heading is the azimuth of the optical axis clockwise from north,
    tilt the elevation of the axis above horizontal, roll the rotation
    about the axis (positive turns image-x toward image-y);
  * the world-to-camera matrix composes as R = Rz(roll) Rx(-tilt) Rh(heading).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .errors import BehindCamera, NonPositiveInput

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float
    ppu: float
    ppv: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_px <= 0:
            raise NonPositiveInput(f"focal_px must be > 0, got {self.focal_px}")
        if not (0 <= self.ppu <= self.width and 0 <= self.ppv <= self.height):
            raise NonPositiveInput("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraPose:
    """Position t = (X, Y, Z) m, angles r = (heading, tilt, roll) rad, and a
    6x6 covariance over (X, Y, Z, heading, tilt, roll).

    A pose prior is just a CameraPose with inflated covariance.
    """

    t: np.ndarray
    r: np.ndarray
    intrinsics: CameraIntrinsics
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        r = np.asarray(self.r, dtype=np.float64).reshape(3).copy()
        r[0] = r[0] % (2.0 * math.pi)
        cov = np.asarray(self.covariance, dtype=np.float64).reshape(6, 6).copy()
        for arr in (t, r, cov):
            arr.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "covariance", cov)

    @property
    def heading(self) -> float:
        return float(self.r[0])

    @property
    def tilt(self) -> float:
        return float(self.r[1])

    @property
    def roll(self) -> float:
        return float(self.r[2])

    def state(self) -> np.ndarray:
        """Stacked 6-vector (X, Y, Z, heading, tilt, roll)."""
        return np.concatenate([self.t, self.r])

    def with_state(self, state: np.ndarray, covariance=None) -> "CameraPose":
        state = np.asarray(state, dtype=np.float64).reshape(6)
        return CameraPose(
            t=state[:3],
            r=state[3:],
            intrinsics=self.intrinsics,
            covariance=self.covariance if covariance is None else covariance,
        )


@dataclass(frozen=True)
class ConfidenceEllipse:
    """Image-space chi-square gate: center, 2x2 covariance, gate threshold."""

    center: np.ndarray
    covariance: np.ndarray
    gate: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(2))
        object.__setattr__(
            self, "covariance", np.asarray(self.covariance, dtype=np.float64).reshape(2, 2)
        )

    def mahalanobis_sq(self, point) -> float:
        d = np.asarray(point, dtype=np.float64).reshape(2) - self.center
        return float(d @ np.linalg.solve(self.covariance, d))

    def contains(self, point) -> bool:
        return self.mahalanobis_sq(point) <= self.gate

    def area(self) -> float:
        """Area of the gate-level ellipse, pi * gate * sqrt(det(cov))."""
        det = float(np.linalg.det(self.covariance))
        return math.pi * self.gate * math.sqrt(max(det, 0.0))


def _heading_matrix(h: float) -> np.ndarray:
    ch, sh = math.cos(h), math.sin(h)
    return np.array([[ch, -sh, 0.0], [0.0, 0.0, -1.0], [sh, ch, 0.0]])


def _tilt_matrix(t: float) -> np.ndarray:
    ct, st = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, ct, st], [0.0, -st, ct]])


def _roll_matrix(ro: float) -> np.ndarray:
    cr, sr = math.cos(ro), math.sin(ro)
    return np.array([[cr, sr, 0.0], [-sr, cr, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_angles(r) -> np.ndarray:
    """World-to-camera rotation for (heading, tilt, roll) radians.

    At (0, 0, 0) the optical axis points north, image-x east, image-y down.
    """
    h, t, ro = (float(v) for v in np.asarray(r, dtype=np.float64).reshape(3))
    return _roll_matrix(ro) @ _tilt_matrix(t) @ _heading_matrix(h)


def rotation_from_angles_batch(r: np.ndarray) -> np.ndarray:
    """Stacked world-to-camera rotations for (n, 3) angle triples."""
    r = np.asarray(r, dtype=np.float64).reshape(-1, 3)
    h, t, ro = r[:, 0], r[:, 1], r[:, 2]
    ch, sh = np.cos(h), np.sin(h)
    ct, st = np.cos(t), np.sin(t)
    cr, sr = np.cos(ro), np.sin(ro)
    z = np.zeros_like(h)
    o = np.ones_like(h)
    A = np.stack(
        [np.stack([ch, -sh, z], -1), np.stack([z, z, -o], -1), np.stack([sh, ch, z], -1)], -2
    )
    T = np.stack(
        [np.stack([o, z, z], -1), np.stack([z, ct, st], -1), np.stack([z, -st, ct], -1)], -2
    )
    Z = np.stack(
        [np.stack([cr, sr, z], -1), np.stack([-sr, cr, z], -1), np.stack([z, z, o], -1)], -2
    )
    return Z @ T @ A


def angles_from_rotation(R: np.ndarray) -> np.ndarray:
    """Recover (heading, tilt, roll) from a world-to-camera matrix.

    Undefined at the gimbal singularity |tilt| = pi/2; intended for the
    RANSAC/DLT path where terrestrial poses stay far from it.
    """
    axis = R[2]  # optical axis in world coordinates
    heading = math.atan2(axis[0], axis[1]) % (2.0 * math.pi)
    tilt = math.asin(np.clip(axis[2], -1.0, 1.0))
    R_ht = _tilt_matrix(tilt) @ _heading_matrix(heading)
    Rz = R @ R_ht.T
    roll = math.atan2(Rz[0, 1], Rz[0, 0])
    return np.array([heading, tilt, roll])


def project_point(pose: CameraPose, point) -> tuple[float, float]:
    """Collinearity projection of a world point to pixel (u, v).

    The result may fall outside the image rectangle; callers clip.
    """
    p = rotation_from_angles(pose.r) @ (np.asarray(point, dtype=np.float64).reshape(3) - pose.t)
    if p[2] <= EPS_DEPTH:
        raise BehindCamera(f"point {point} has camera depth {p[2]:.3g} <= {EPS_DEPTH}")
    k = pose.intrinsics
    return (
        float(k.ppu + k.focal_px * p[0] / p[2]),
        float(k.ppv + k.focal_px * p[1] / p[2]),
    )


def project_points(pose: CameraPose, points: np.ndarray):
    """Vectorized projection of (n, 3) world points.

    Returns (uv (n, 2), in_front bool mask); behind-camera rows are NaN
    instead of raising, so bulk callers can mask.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = (pts - pose.t) @ rotation_from_angles(pose.r).T
    in_front = p[:, 2] > EPS_DEPTH
    z = np.where(in_front, p[:, 2], np.nan)
    k = pose.intrinsics
    uv = np.column_stack([k.ppu + k.focal_px * p[:, 0] / z, k.ppv + k.focal_px * p[:, 1] / z])
    return uv, in_front


def pixel_ray(pose: CameraPose, u, v) -> np.ndarray:
    """Unit world-frame direction of the ray through pixel(s) (u, v)."""
    k = pose.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack(
        [(u - k.ppu) / k.focal_px, (v - k.ppv) / k.focal_px, np.ones_like(u)], axis=-1
    )
    d_world = d_cam @ rotation_from_angles(pose.r)  # == R.T applied to rows
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def fov_from_focal(
    focal_mm: float, sensor_width_mm: float, image_width_px: float
) -> tuple[float, float]:
    """Horizontal FOV (radians) and focal length in pixels from focal metadata."""
    if focal_mm <= 0 or sensor_width_mm <= 0 or image_width_px <= 0:
        raise NonPositiveInput(
            f"all inputs must be > 0, got ({focal_mm}, {sensor_width_mm}, {image_width_px})"
        )
    fov = 2.0 * math.atan(sensor_width_mm / (2.0 * focal_mm))
    focal_px = focal_mm * image_width_px / sensor_width_mm
    return fov, focal_px


def _rotation_factors(r):
    h, t, ro = (float(v) for v in np.asarray(r, dtype=np.float64).reshape(3))
    A = _heading_matrix(h)
    T = _tilt_matrix(t)
    Z = _roll_matrix(ro)
    ch, sh = math.cos(h), math.sin(h)
    ct, st = math.cos(t), math.sin(t)
    cr, sr = math.cos(ro), math.sin(ro)
    dA = np.array([[-sh, -ch, 0.0], [0.0, 0.0, 0.0], [ch, -sh, 0.0]])
    dT = np.array([[0.0, 0.0, 0.0], [0.0, -st, ct], [0.0, -ct, -st]])
    dZ = np.array([[-sr, cr, 0.0], [-cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return A, T, Z, dA, dT, dZ


def projection_jacobian(pose: CameraPose, point) -> tuple[np.ndarray, np.ndarray]:
    """Projected (u, v) and the analytic 2x6 Jacobian of the collinearity
    equations w.r.t. (X, Y, Z, heading, tilt, roll)."""
    P = np.asarray(point, dtype=np.float64).reshape(3)
    A, T, Z, dA, dT, dZ = _rotation_factors(pose.r)
    R = Z @ T @ A
    w = P - pose.t
    p = R @ w
    if p[2] <= EPS_DEPTH:
        raise BehindCamera(f"point {point} behind camera in jacobian")

    dp = np.empty((3, 6))
    dp[:, 0:3] = -R
    dp[:, 3] = Z @ T @ dA @ w
    dp[:, 4] = Z @ dT @ A @ w
    dp[:, 5] = dZ @ T @ A @ w

    f = pose.intrinsics.focal_px
    x, y, z = p
    du = f * (dp[0] * z - x * dp[2]) / z**2
    dv = f * (dp[1] * z - y * dp[2]) / z**2
    k = pose.intrinsics
    uv = np.array([k.ppu + f * x / z, k.ppv + f * y / z])
    return uv, np.vstack([du, dv])


def chi2_gate(confidence: float = 0.95, dof: int = 2) -> float:
    """Chi-square quantile used as the confidence-ellipse gate (5.991 at 95%, 2 dof)."""
    return float(chi2.ppf(confidence, dof))


def propagate_pose_covariance(
    pose: CameraPose, point, pixel_noise: float = 0.0, confidence: float = 0.95
) -> ConfidenceEllipse:
    """First-order propagation of the 6-dof pose covariance through the
    projection: ellipse covariance J Sigma J^T + pixel_noise^2 I."""
    if pixel_noise < 0:
        raise NonPositiveInput(f"pixel_noise must be >= 0, got {pixel_noise}")
    uv, J = projection_jacobian(pose, point)
    cov = J @ pose.covariance @ J.T + pixel_noise**2 * np.eye(2)
    return ConfidenceEllipse(center=uv, covariance=cov, gate=chi2_gate(confidence))
