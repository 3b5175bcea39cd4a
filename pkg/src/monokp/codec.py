"""Encode/decode semantics of the detection heads.

Head maps live on a stride-4 grid.  At an object's main-center cell the maps
hold: 18 keypoint offsets (in cells, relative to the cell), 3 log-dimension
residuals against the class prior, 8 Multi-Bin orientation values and a 3D
confidence.  The main-center heatmap has one channel per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ShapeMismatch
from .geometry import (
    NUM_KEYPOINTS,
    CameraModel,
    Dimension3D,
    KeypointSet,
    alpha_to_theta,
    bbox_from_3d,
    normalize_angle,
    project_box,
    theta_to_alpha,
)
from .grm import solve_full

STRIDE = 4
PEAK_THRESHOLD = 0.4
DIMENSION_PRIOR = (1.63, 1.53, 3.88)  # h, w, l in meters

# Multi-Bin layout: [b1 out, b1 in, b1 sin, b1 cos, b2 out, b2 in, b2 sin, b2 cos]
BIN_CENTERS = (-0.5 * math.pi, 0.5 * math.pi)
BIN_HALF_WIDTH = 2.0 * math.pi / 3.0
ENCODED_LOGIT = 10.0


def decode_dimension(delta) -> Dimension3D:
    d = np.asarray(delta, dtype=np.float64).reshape(3)
    h, w, l = np.array(DIMENSION_PRIOR) * np.exp(d)
    return Dimension3D(float(h), float(w), float(l))


def encode_dimension(dim: Dimension3D) -> np.ndarray:
    return np.log(dim.as_array() / np.array(DIMENSION_PRIOR))


def bin_membership(alpha: float) -> tuple[bool, bool]:
    """Whether alpha falls in each of the two overlapping bins."""
    a = normalize_angle(alpha)
    return (
        abs(normalize_angle(a - BIN_CENTERS[0])) <= BIN_HALF_WIDTH,
        abs(normalize_angle(a - BIN_CENTERS[1])) <= BIN_HALF_WIDTH,
    )


def encode_orientation(alpha: float, logit: float = ENCODED_LOGIT) -> np.ndarray:
    """8-vector for alpha; class slots are saturated logits (out, in).

    Both bins carry the residual to their own center so either decodes.
    """
    out = np.zeros(8)
    for b, member in enumerate(bin_membership(alpha)):
        res = alpha - BIN_CENTERS[b]
        o = 4 * b
        out[o : o + 2] = (0.0, logit) if member else (logit, 0.0)
        out[o + 2] = math.sin(res)
        out[o + 3] = math.cos(res)
    return out


def _in_prob(logits) -> float:
    # softmax probability of the "in" slot, stable form
    return 1.0 / (1.0 + math.exp(float(logits[0]) - float(logits[1])))


def decode_orientation(vec) -> float:
    vec = np.asarray(vec, dtype=np.float64).reshape(8)
    b = 0 if _in_prob(vec[0:2]) >= _in_prob(vec[4:6]) else 1
    o = 4 * b
    return normalize_angle(BIN_CENTERS[b] + math.atan2(vec[o + 2], vec[o + 3]))


@dataclass(frozen=True)
class Peak:
    cls: int
    row: int
    col: int
    score: float


def extract_peaks(heatmap, threshold: float = PEAK_THRESHOLD, top_k: int | None = None) -> list[Peak]:
    """3x3 non-maximum suppression on an (H, W, C) heatmap.

    Within a window of equal maxima only the lexicographically smallest
    (row, col) cell survives.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    if heat.ndim == 2:
        heat = heat[:, :, None]
    H, W, C = heat.shape
    padded = np.full((H + 2, W + 2, C), -np.inf)
    padded[1:-1, 1:-1] = heat
    keep = heat >= threshold
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W]
            if (dr, dc) < (0, 0):
                keep &= heat > nb
            else:
                keep &= heat >= nb
    rows, cols, chans = np.nonzero(keep)
    peaks = [Peak(int(k), int(r), int(c), float(heat[r, c, k])) for r, c, k in zip(rows, cols, chans)]
    peaks.sort(key=lambda p: (-p.score, p.cls, p.row, p.col))
    if top_k is not None:
        peaks = peaks[:top_k]
    return peaks


@dataclass(eq=False)
class HeadMaps:
    main_center: np.ndarray  # (H, W, C)
    kp_offsets: np.ndarray  # (H, W, 18)
    dim_residual: np.ndarray  # (H, W, 3)
    orient: np.ndarray  # (H, W, 8)
    conf3d: np.ndarray  # (H, W, 1)
    stride: int = STRIDE

    CHANNELS = {"kp_offsets": 18, "dim_residual": 3, "orient": 8, "conf3d": 1}

    def __post_init__(self):
        self.main_center = np.asarray(self.main_center, dtype=np.float64)
        if self.main_center.ndim == 2:
            self.main_center = self.main_center[:, :, None]
        H, W = self.main_center.shape[:2]
        for name, ch in self.CHANNELS.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 2 and ch == 1:
                arr = arr[:, :, None]
            if arr.shape != (H, W, ch):
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {(H, W, ch)}")
            setattr(self, name, arr)
        for name in ("main_center", "conf3d"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ShapeMismatch(f"{name} values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.main_center.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.main_center.shape[2]

    @classmethod
    def empty(cls, height: int, width: int, num_classes: int = 1, stride: int = STRIDE) -> "HeadMaps":
        return cls(
            np.zeros((height, width, num_classes)),
            np.zeros((height, width, 18)),
            np.zeros((height, width, 3)),
            np.zeros((height, width, 8)),
            np.zeros((height, width, 1)),
            stride,
        )


@dataclass(eq=False)
class PredictionSet:
    """Decoded per-object head outputs in pixel coordinates."""

    cls: int
    center: np.ndarray
    score2d: float
    keypoints: KeypointSet
    dim: Dimension3D
    alpha: float
    conf3d: float
    position: np.ndarray | None = None
    theta: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)

    @property
    def fused(self) -> float:
        return self.score2d * self.conf3d


def fuse_scores(score2d: float, conf3d: float) -> float:
    return score2d * conf3d


def center_cell(center, stride: int = STRIDE) -> tuple[int, int]:
    """(row, col) of the grid cell holding a pixel position."""
    return int(math.floor(center[1] / stride)), int(math.floor(center[0] / stride))


def encode_object(maps: HeadMaps, row: int, col: int, keypoints, dim: Dimension3D, alpha: float, conf3d: float = 1.0) -> None:
    """Write one object's regression targets into the maps at (row, col)."""
    pts = keypoints.pts if isinstance(keypoints, KeypointSet) else np.asarray(keypoints, dtype=np.float64)
    maps.kp_offsets[row, col] = (pts / maps.stride - np.array([col, row])).ravel()
    maps.dim_residual[row, col] = encode_dimension(dim)
    maps.orient[row, col] = encode_orientation(alpha)
    maps.conf3d[row, col, 0] = conf3d


def decode_objects(
    maps: HeadMaps,
    cam: CameraModel | None = None,
    run_grm: bool = True,
    threshold: float = PEAK_THRESHOLD,
    top_k: int | None = None,
) -> list[PredictionSet]:
    """Turn head maps into per-object predictions.

    A failed position solve leaves ``position`` as None and records the
    error message under ``extra["grm_error"]``.
    """
    stride = maps.stride
    preds = []
    for peak in extract_peaks(maps.main_center, threshold, top_k):
        r, c = peak.row, peak.col
        cell = np.array([c, r], dtype=np.float64)
        pts = stride * (cell + maps.kp_offsets[r, c].reshape(NUM_KEYPOINTS, 2))
        pred = PredictionSet(
            cls=peak.cls,
            center=stride * cell,
            score2d=peak.score,
            keypoints=KeypointSet(pts),
            dim=decode_dimension(maps.dim_residual[r, c]),
            alpha=decode_orientation(maps.orient[r, c]),
            conf3d=float(maps.conf3d[r, c, 0]),
        )
        if run_grm and cam is not None:
            pred.theta = alpha_to_theta(pred.alpha, pts[8], cam)
            try:
                pred.position = solve_full(pred.keypoints, pred.dim, pred.theta, cam).T
            except GeometryError as exc:
                pred.extra["grm_error"] = str(exc)
        preds.append(pred)
    return preds


def predictions_from_boxes(boxes, cam: CameraModel, score2d: float = 1.0, conf3d: float = 1.0, cls: int = 0) -> list[PredictionSet]:
    """Exact predictions for known boxes (handy for fixtures)."""
    preds = []
    for box in boxes:
        kps = project_box(cam, box)
        u0, v0, u1, v1 = bbox_from_3d(cam, box)
        alpha = theta_to_alpha(box.theta, kps.pts[8], cam)
        preds.append(
            PredictionSet(cls, ((u0 + u1) / 2, (v0 + v1) / 2), score2d, kps, box.dim, alpha, conf3d, box.T.copy(), box.theta)
        )
    return preds
