"""Forward perspective model for 3D boxes seen by a pinhole camera.

Conventions (KITTI camera frame): x right, y down, z forward.  A box is
center-anchored: its local corners sit at (+-l/2, +-h/2, +-w/2) and the yaw
``theta`` rotates about the camera y axis.  Keypoints are the 8 projected
corners followed by the projected box center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, NonPositiveDepth

NUM_KEYPOINTS = 9
MIN_DEPTH = 1e-6

# (x, y, z) signs in units of (l/2, h/2, w/2); row 8 is the box center.
CORNER_SIGNS = np.array(
    [
        [+1, +1, +1],
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, +1, +1],
        [+1, -1, +1],
        [+1, -1, -1],
        [-1, -1, -1],
        [-1, -1, +1],
        [0, 0, 0],
    ],
    dtype=np.float64,
)


def normalize_angle(angle: float) -> float:
    """Fold an angle into (-pi, pi]."""
    a = math.remainder(float(angle), 2.0 * math.pi)
    while a <= -math.pi:
        a += 2.0 * math.pi
    while a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True, eq=False)
class CameraModel:
    """3x4 projection ``P = K [I | t]`` with upper-triangular K."""

    P: np.ndarray
    K: np.ndarray = field(init=False, repr=False)
    t: np.ndarray = field(init=False, repr=False)
    K_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        if P.shape != (3, 4) or not np.all(np.isfinite(P)):
            raise GeometryError(f"projection matrix must be a finite 3x4 array, got shape {P.shape}")
        K = P[:, :3].copy()
        scale = np.abs(K).max()
        if abs(K[1, 0]) > 1e-12 * scale or abs(K[2, 0]) > 1e-12 * scale or abs(K[2, 1]) > 1e-12 * scale:
            raise GeometryError("intrinsic block of P is not upper triangular")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise GeometryError(f"P[2][2] must be 1, got {K[2, 2]}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        K[1, 0] = K[2, 0] = K[2, 1] = 0.0
        K_inv = np.linalg.inv(K)
        t = K_inv @ P[:, 3]
        P.setflags(write=False)
        for name, value in (("P", P), ("K", K), ("t", t), ("K_inv", K_inv)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, t=(0.0, 0.0, 0.0)) -> "CameraModel":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(np.hstack([K, (K @ np.asarray(t, dtype=np.float64)).reshape(3, 1)]))

    @classmethod
    def from_kt(cls, K, t) -> "CameraModel":
        K = np.asarray(K, dtype=np.float64)
        return cls(np.hstack([K, (K @ np.asarray(t, dtype=np.float64)).reshape(3, 1)]))

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 3) camera-frame points to (N, 2) pixels."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        q = points + self.t
        depth = q[:, 2]
        if np.any(depth <= MIN_DEPTH):
            raise NonPositiveDepth(f"point depth {depth.min():.3g} m is not in front of the camera")
        h = q @ self.K.T
        return h[:, :2] / h[:, 2:3]


@dataclass(frozen=True)
class Dimension3D:
    h: float
    w: float
    l: float

    def __post_init__(self):
        for name in ("h", "w", "l"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise GeometryError(f"dimensions must be positive, got {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.w, self.l], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ObjectBox3D:
    dim: Dimension3D
    theta: float
    T: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))
        if self.alpha is not None:
            object.__setattr__(self, "alpha", normalize_angle(self.alpha))
        T = np.array(self.T, dtype=np.float64).reshape(3)
        if not T[2] > 0:
            raise NonPositiveDepth(f"box center depth must be positive, got Z={T[2]}")
        T.setflags(write=False)
        object.__setattr__(self, "T", T)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """9 ordered image points with a keep-mask (True = kept)."""

    pts: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        pts = np.array(self.pts, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 2):
            raise GeometryError(f"expected 9x2 keypoints, got {pts.shape}")
        if self.mask is None:
            mask = np.ones(NUM_KEYPOINTS, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool).reshape(NUM_KEYPOINTS)
        pts.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "pts", pts)
        object.__setattr__(self, "mask", mask)

    def with_mask(self, mask) -> "KeypointSet":
        return KeypointSet(self.pts, mask)

    @property
    def center(self) -> np.ndarray:
        return self.pts[8]


def local_corners(dim: Dimension3D) -> np.ndarray:
    """(9, 3) corner offsets in the box frame, center last."""
    half = np.array([dim.l, dim.h, dim.w], dtype=np.float64) / 2.0
    return CORNER_SIGNS * half


def rotate_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def box_points(box: ObjectBox3D) -> np.ndarray:
    """(9, 3) camera-frame points of the box corners and center."""
    return local_corners(box.dim) @ rotate_y(box.theta).T + box.T


def project_box(cam: CameraModel, box: ObjectBox3D) -> KeypointSet:
    return KeypointSet(cam.project(box_points(box)))


def normalize_keypoints(cam: CameraModel, pts) -> np.ndarray:
    """Map pixel points (N, 2) to normalized image coordinates K^-1 (u, v, 1)."""
    if isinstance(pts, KeypointSet):
        pts = pts.pts
    pts = np.asarray(pts, dtype=np.float64)
    Ki = cam.K_inv
    return pts @ Ki[:2, :2].T + Ki[:2, 2]


def denormalize_keypoints(cam: CameraModel, norm_pts) -> np.ndarray:
    norm_pts = np.asarray(norm_pts, dtype=np.float64)
    K = cam.K
    return norm_pts @ K[:2, :2].T + K[:2, 2]


def ray_angle(u: float, cam: CameraModel) -> float:
    """Horizontal angle of the viewing ray through image column ``u``."""
    return math.atan2((u - cam.cx) / cam.fx, 1.0)


def alpha_to_theta(alpha: float, center_kp, cam: CameraModel) -> float:
    """Global yaw from local orientation; ``center_kp`` is the projected 3D center."""
    return normalize_angle(alpha + ray_angle(float(center_kp[0]), cam))


def theta_to_alpha(theta: float, center_kp, cam: CameraModel) -> float:
    return normalize_angle(theta - ray_angle(float(center_kp[0]), cam))


def bbox_from_3d(cam: CameraModel, box: ObjectBox3D) -> tuple[float, float, float, float]:
    """Tightest 2D box (u_min, v_min, u_max, v_max) around the 8 projected corners."""
    corners = project_box(cam, box).pts[:8]
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])
