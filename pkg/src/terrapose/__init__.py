"""terrapose: geometric and statistical core of satellite-to-street scene analysis."""

from .terrain import DemGrid, load_ascii_grid, sample_elevation, synth_terrain, write_ascii_grid
from .camera import (
    CameraIntrinsics,
    CameraPose,
    ConfidenceEllipse,
    fov_from_focal,
    project_point,
    propagate_pose_covariance,
    rotation_from_angles,
)

__version__ = "0.1.0"

__all__ = [
    "DemGrid",
    "load_ascii_grid",
    "write_ascii_grid",
    "sample_elevation",
    "synth_terrain",
    "CameraIntrinsics",
    "CameraPose",
    "ConfidenceEllipse",
    "rotation_from_angles",
    "project_point",
    "fov_from_focal",
    "propagate_pose_covariance",
    "__version__",
]
