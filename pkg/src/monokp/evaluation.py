"""Detection metrics: 2D / BEV / 3D IoU, AP11 / AP40 and AOS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import ObjectBox3D
from .kitti_io import Difficulty, KittiObject, difficulty

MERGE_EPS = 1e-9

METRICS = ("AP2D", "APBEV", "AP3D", "AOS")
LEVELS = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)

DEFAULT_THRESHOLDS = {
    "Car": {"AP2D": 0.7, "APBEV": 0.7, "AP3D": 0.7, "AOS": 0.7},
    "Pedestrian": {"AP2D": 0.5, "APBEV": 0.5, "AP3D": 0.5, "AOS": 0.5},
    "Cyclist": {"AP2D": 0.5, "APBEV": 0.5, "AP3D": 0.5, "AOS": 0.5},
}
# labels of a similar class are neither counted nor penalized
NEIGHBOR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}


def iou_2d(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def bev_corners(x: float, z: float, l: float, w: float, yaw: float) -> np.ndarray:
    """(4, 2) ground-plane (x, z) corners, counter-clockwise."""
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
    xs = local[:, 0] * c + local[:, 1] * s
    zs = -local[:, 0] * s + local[:, 1] * c
    poly = np.stack([xs + x, zs + z], axis=1)
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def polygon_area(poly) -> float:
    """Signed shoelace area (positive when counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = np.asarray(poly)[:, 0], np.asarray(poly)[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        inputs, output = output, []
        for j, cur in enumerate(inputs):
            prev = inputs[j - 1]
            cur_in = _cross(a, b, cur) >= -MERGE_EPS
            prev_in = _cross(a, b, prev) >= -MERGE_EPS
            if cur_in:
                if not prev_in:
                    output.append(_intersect(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_intersect(prev, cur, a, b))
    return _merge_close(output)


def _intersect(p, q, a, b):
    d1 = _cross(a, b, p)
    d2 = _cross(a, b, q)
    t = d1 / (d1 - d2)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _merge_close(points) -> list:
    merged = []
    for p in points:
        if not merged or math.dist(p, merged[-1]) > MERGE_EPS:
            merged.append(p)
    while len(merged) > 1 and math.dist(merged[0], merged[-1]) <= MERGE_EPS:
        merged.pop()
    return merged


def bev_intersection(a, b) -> float:
    # work relative to the midpoint of the two centers: symmetric in (a, b)
    # and avoids cancellation when boxes are small and far from the origin
    ox, oz = 0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])
    a = (a[0] - ox, a[1] - oz, *a[2:])
    b = (b[0] - ox, b[1] - oz, *b[2:])
    poly = clip_polygon(bev_corners(*a), bev_corners(*b))
    return max(polygon_area(poly), 0.0) if len(poly) >= 3 else 0.0


def bev_iou(a, b) -> float:
    """IoU of two ground-plane rectangles given as (x, z, l, w, yaw)."""
    inter = bev_intersection(a, b)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _bev_params(box: ObjectBox3D):
    return (box.T[0], box.T[2], box.dim.l, box.dim.w, box.theta)


def iou_3d(a: ObjectBox3D, b: ObjectBox3D) -> float:
    """Volume IoU of two center-anchored yaw-rotated boxes."""
    top = min(a.T[1] + a.dim.h / 2, b.T[1] + b.dim.h / 2)
    bottom = max(a.T[1] - a.dim.h / 2, b.T[1] - b.dim.h / 2)
    overlap = top - bottom
    if overlap <= 0:
        return 0.0
    inter = bev_intersection(_bev_params(a), _bev_params(b)) * overlap
    vol_a = a.dim.h * a.dim.w * a.dim.l
    vol_b = b.dim.h * b.dim.w * b.dim.l
    return float(inter / (vol_a + vol_b - inter))


def _kitti_bev(o: KittiObject):
    h, w, l = o.dimensions
    return (o.location[0], o.location[2], l, w, o.rotation_y)


def _kitti_iou3d(a: KittiObject, b: KittiObject) -> float:
    # bottom-center labels: y spans [y - h, y]
    top = min(a.location[1], b.location[1])
    bottom = max(a.location[1] - a.dimensions[0], b.location[1] - b.dimensions[0])
    overlap = top - bottom
    if overlap <= 0:
        return 0.0
    inter = bev_intersection(_kitti_bev(a), _kitti_bev(b)) * overlap
    vol_a = float(np.prod(a.dimensions))
    vol_b = float(np.prod(b.dimensions))
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


def object_iou(det: KittiObject, gt: KittiObject, metric: str) -> float:
    if metric in ("AP2D", "AOS"):
        return iou_2d(det.bbox, gt.bbox)
    if metric == "APBEV":
        return bev_iou(_kitti_bev(det), _kitti_bev(gt))
    if metric == "AP3D":
        return _kitti_iou3d(det, gt)
    raise ValueError(f"unknown metric {metric!r}")


def recall_points(sampling: int) -> np.ndarray:
    if sampling == 11:
        return np.linspace(0.0, 1.0, 11)
    if sampling == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError(f"recall sampling must be 11 or 40, got {sampling}")


@dataclass
class EvalConfig:
    metric: str = "AP3D"
    sampling: int = 40
    thresholds: dict = field(default_factory=lambda: {c: dict(m) for c, m in DEFAULT_THRESHOLDS.items()})
    dontcare_overlap: float = 0.5

    def threshold(self, cls: str) -> float:
        return self.thresholds.get(cls, {}).get(self.metric, 0.5)


@dataclass
class PrCurve:
    scores: np.ndarray
    tp: np.ndarray  # bool per counted detection, descending score
    similarity: np.ndarray
    n_gt: int
    recall: np.ndarray
    precision: np.ndarray
    sampled_recall: np.ndarray
    sampled_precision: np.ndarray
    sampled_similarity: np.ndarray


@dataclass
class ApResult:
    cls: str
    metric: str
    threshold: float
    sampling: int
    ap: dict  # Difficulty -> float
    curves: dict  # Difficulty -> PrCurve


def match_image(dets, gts, cls: str, level: Difficulty, metric: str, threshold: float, dontcare_overlap: float = 0.5):
    """Greedy per-image matching.

    Returns (entries, n_valid) with entries = [(score, is_tp, similarity)]
    for every detection that counts (ignored ones are dropped).
    """
    neighbors = NEIGHBOR_CLASSES.get(cls, ())
    gt_state = []  # 1 valid, 0 ignored, -1 not considered
    dontcare = []
    for g in gts:
        if g.type == "DontCare":
            dontcare.append(g)
            gt_state.append(-1)
        elif g.type == cls:
            gt_state.append(1 if difficulty(g) <= level else 0)
        elif g.type in neighbors:
            gt_state.append(0)
        else:
            gt_state.append(-1)
    used = [False] * len(gts)
    cand = [d for d in dets if d.type == cls]
    order = sorted(range(len(cand)), key=lambda i: -(cand[i].score or 0.0))
    entries = []
    for i in order:
        det = cand[i]
        best, best_iou = -1, threshold
        for want in (1, 0):
            for j, g in enumerate(gts):
                if used[j] or gt_state[j] != want:
                    continue
                ov = object_iou(det, g, metric)
                if ov >= best_iou and (best < 0 or ov > best_iou):
                    best, best_iou = j, ov
            if best >= 0:
                break
        if best >= 0:
            used[best] = True
            if gt_state[best] == 1:
                sim = (1.0 + math.cos(det.rotation_y - gts[best].rotation_y)) / 2.0
                entries.append((det.score or 0.0, True, sim))
            continue
        if any(_inside_fraction(det.bbox, dc.bbox) >= dontcare_overlap for dc in dontcare):
            continue
        entries.append((det.score or 0.0, False, 0.0))
    return entries, sum(1 for s in gt_state if s == 1)


def _inside_fraction(det_box, region) -> float:
    ix = min(det_box[2], region[2]) - max(det_box[0], region[0])
    iy = min(det_box[3], region[3]) - max(det_box[1], region[1])
    area = (det_box[2] - det_box[0]) * (det_box[3] - det_box[1])
    if ix <= 0 or iy <= 0 or area <= 0:
        return 0.0
    return ix * iy / area


def pr_curve(entries, n_gt: int, sampling: int) -> PrCurve:
    entries = sorted(entries, key=lambda e: -e[0])
    scores = np.array([e[0] for e in entries], dtype=np.float64)
    tp = np.array([e[1] for e in entries], dtype=bool)
    sim = np.array([e[2] for e in entries], dtype=np.float64)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(entries) + 1)
    precision = ctp / ranks if len(entries) else np.zeros(0)
    similarity = np.cumsum(sim) / ranks if len(entries) else np.zeros(0)
    recall = ctp / n_gt if n_gt > 0 else np.zeros(len(entries))
    # right-to-left running max makes precision monotone in recall
    interp_p = np.maximum.accumulate(precision[::-1])[::-1] if len(entries) else precision
    interp_s = np.maximum.accumulate(similarity[::-1])[::-1] if len(entries) else similarity
    pts = recall_points(sampling)
    sp = np.zeros(len(pts))
    ss = np.zeros(len(pts))
    for k, r in enumerate(pts):
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < len(entries):
            sp[k] = interp_p[idx]
            ss[k] = interp_s[idx]
    return PrCurve(scores, tp, sim, n_gt, recall, precision, pts, sp, ss)


def average_precision(dets_by_image, gts_by_image, cls: str, cfg: EvalConfig, threshold: float | None = None) -> ApResult:
    """AP (or AOS) for one class at every difficulty level.

    ``dets_by_image`` and ``gts_by_image`` are parallel sequences of
    per-image KittiObject lists.  Difficulty levels are cumulative: Hard
    includes Moderate and Easy ground truth.
    """
    thr = cfg.threshold(cls) if threshold is None else threshold
    ap, curves = {}, {}
    for level in LEVELS:
        entries, n_gt = [], 0
        for dets, gts in zip(dets_by_image, gts_by_image):
            e, n = match_image(dets, gts, cls, level, cfg.metric, thr, cfg.dontcare_overlap)
            entries.extend(e)
            n_gt += n
        curve = pr_curve(entries, n_gt, cfg.sampling)
        curves[level] = curve
        if n_gt == 0:
            ap[level] = float("nan")
        elif cfg.metric == "AOS":
            ap[level] = float(curve.sampled_similarity.mean())
        else:
            ap[level] = float(curve.sampled_precision.mean())
    return ApResult(cls, cfg.metric, thr, cfg.sampling, ap, curves)
