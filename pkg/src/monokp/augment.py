"""Coordinate-level augmentations as elements of the 2D affine group.

An augmentation is an optional horizontal flip (``u -> width - 1 - u``)
followed by a 2x3 affine map.  Pixel centers sit at integer coordinates.
Under a flip the keypoint identities are re-labelled so index i still names
the same corner of the mirrored object, and angles map alpha -> pi - alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .codec import PredictionSet
from .errors import InvalidScale
from .geometry import (
    CameraModel,
    KeypointSet,
    alpha_to_theta,
    normalize_angle,
)
from .grm import solve_full

SCALE_RANGE = (0.6, 1.4)
# left/right mirror swaps the sign of the box-frame z coordinate
FLIP_PERMUTATION = np.array([1, 0, 3, 2, 5, 4, 7, 6, 8])


@dataclass(frozen=True, eq=False)
class AffineAug:
    M: np.ndarray
    flip: bool = False
    image_width: float = 0.0

    def __post_init__(self):
        M = np.array(self.M, dtype=np.float64).reshape(2, 3)
        if abs(np.linalg.det(M[:, :2])) <= 1e-9:
            raise InvalidScale("affine linear part is singular")
        M.setflags(write=False)
        object.__setattr__(self, "M", M)

    @property
    def flip_matrix(self) -> np.ndarray:
        """3x3 homogeneous flip (identity when not flipping)."""
        if not self.flip:
            return np.eye(3)
        return np.array([[-1.0, 0.0, self.image_width - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    @property
    def matrix(self) -> np.ndarray:
        """Full 3x3 homogeneous map: affine after flip."""
        A = np.vstack([self.M, [0.0, 0.0, 1.0]])
        return A @ self.flip_matrix


def identity_aug(image_width: float = 0.0) -> AffineAug:
    return AffineAug(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), False, image_width)


def make_aug(scale: float, shift=(0.0, 0.0), flip: bool = False, image_width: float = 0.0) -> AffineAug:
    if not SCALE_RANGE[0] <= scale <= SCALE_RANGE[1]:
        raise InvalidScale(f"scale {scale} outside [{SCALE_RANGE[0]}, {SCALE_RANGE[1]}]")
    dx, dy = shift
    return AffineAug(np.array([[scale, 0.0, dx], [0.0, scale, dy]]), bool(flip), image_width)


def random_aug(rng: np.random.Generator, image_width: float, image_height: float, flip_prob: float = 0.5, max_shift: float | None = None) -> AffineAug:
    """Uniform scale in the allowed range, shift within the image, random flip."""
    scale = rng.uniform(*SCALE_RANGE)
    sx = image_width if max_shift is None else max_shift
    sy = image_height if max_shift is None else max_shift
    shift = (rng.uniform(-sx, sx) * 0.5, rng.uniform(-sy, sy) * 0.5)
    return make_aug(scale, shift, rng.random() < flip_prob, image_width)


def apply_points(aug: AffineAug, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    m = aug.matrix
    return pts @ m[:2, :2].T + m[:2, 2]


def invert_points(aug: AffineAug, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    m = np.linalg.inv(aug.matrix)
    return pts @ m[:2, :2].T + m[:2, 2]


def apply_point(aug: AffineAug, p) -> np.ndarray:
    return apply_points(aug, np.asarray(p, dtype=np.float64).reshape(1, 2))[0]


def invert_point(aug: AffineAug, p) -> np.ndarray:
    return invert_points(aug, np.asarray(p, dtype=np.float64).reshape(1, 2))[0]


def _permute(kps: KeypointSet, pts: np.ndarray, flip: bool) -> KeypointSet:
    if not flip:
        return KeypointSet(pts, kps.mask)
    return KeypointSet(pts[FLIP_PERMUTATION], kps.mask[FLIP_PERMUTATION])


def apply_keypoints(aug: AffineAug, kps: KeypointSet) -> KeypointSet:
    return _permute(kps, apply_points(aug, kps.pts), aug.flip)


def invert_keypoints(aug: AffineAug, kps: KeypointSet) -> KeypointSet:
    # the permutation is an involution, so the same relabelling undoes it
    return _permute(kps, invert_points(aug, kps.pts), aug.flip)


def apply_alpha(aug: AffineAug, alpha: float) -> float:
    return normalize_angle(math.pi - alpha) if aug.flip else normalize_angle(alpha)


invert_alpha = apply_alpha


def apply_intrinsics(aug: AffineAug, cam: CameraModel) -> CameraModel:
    """Camera seeing the augmented image.

    Projecting a point mirrored by x -> -x (when flipping) through the new
    camera equals augmenting the original projection.  The camera offset's
    x component is mirrored with the scene.
    """
    S = np.diag([-1.0, 1.0, 1.0]) if aug.flip else np.eye(3)
    K = np.vstack([aug.M, [0.0, 0.0, 1.0]]) @ aug.flip_matrix @ cam.K @ S
    return CameraModel.from_kt(K, S @ cam.t)


def mirror_position(aug: AffineAug, T):
    T = np.asarray(T, dtype=np.float64)
    return T * np.array([-1.0, 1.0, 1.0]) if aug.flip else T.copy()


def transform_predictions(preds, aug: AffineAug) -> list[PredictionSet]:
    """Express canonical predictions in the augmented image frame."""
    out = []
    for p in preds:
        out.append(
            replace(
                p,
                center=apply_point(aug, p.center),
                keypoints=apply_keypoints(aug, p.keypoints),
                alpha=apply_alpha(aug, p.alpha),
                position=None if p.position is None else mirror_position(aug, p.position),
                theta=None if p.theta is None else apply_alpha(aug, p.theta),
                extra=dict(p.extra),
            )
        )
    return out


def dealign(preds, aug: AffineAug, cam: CameraModel) -> list[PredictionSet]:
    """Map predictions made under ``aug`` back to the canonical frame.

    Positions are re-solved from the de-augmented keypoints with the
    original camera ``cam``.
    """
    out = []
    for p in preds:
        kps = invert_keypoints(aug, p.keypoints)
        alpha = invert_alpha(aug, p.alpha)
        theta = alpha_to_theta(alpha, kps.pts[8], cam)
        T = solve_full(kps, p.dim, theta, cam).T
        out.append(
            replace(
                p,
                center=invert_point(aug, p.center),
                keypoints=kps,
                alpha=alpha,
                position=T,
                theta=theta,
                extra=dict(p.extra),
            )
        )
    return out
