"""Monocular 3D detection from projected box keypoints.

Geometry, the least-squares position solver and its gradients, head-map
codecs, training losses, augmentation, KITTI I/O, evaluation metrics and
independent reference oracles.
"""

from .errors import (
    BehindCamera,
    DegenerateSystem,
    FormatError,
    GeometryError,
    InsufficientConstraints,
    MonoKPError,
    NonPositiveDepth,
)
from .geometry import CameraModel, Dimension3D, KeypointSet, ObjectBox3D, project_box
from .grm import grm_backward, keypoint_dropout, solve_full

__version__ = "0.1.0"

__all__ = [
    "BehindCamera",
    "CameraModel",
    "DegenerateSystem",
    "Dimension3D",
    "FormatError",
    "GeometryError",
    "InsufficientConstraints",
    "KeypointSet",
    "MonoKPError",
    "NonPositiveDepth",
    "ObjectBox3D",
    "grm_backward",
    "keypoint_dropout",
    "project_box",
    "solve_full",
]
