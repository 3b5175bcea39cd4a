"""Training objectives for the keypoint detector and its semi-supervised extension."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import dealign
from .codec import BIN_CENTERS, bin_membership, decode_orientation
from .errors import ShapeMismatch
from .evaluation import iou_3d
from .geometry import CameraModel, Dimension3D, KeypointSet, ObjectBox3D, alpha_to_theta
from .grm import solve_full

FOCAL_ALPHA = 2
FOCAL_BETA = 4
PROB_EPS = 1e-7
DEPTH_ALPHA = 0.01
DEPTH_KNEE = 5.0
RAMPUP_EPOCHS = 100.0
MATCH_RADIUS = 8.0

TERMS = ("m", "kc", "D", "O", "T", "conf")


@dataclass
class LossWeights:
    w_m: float = 1.0
    w_kc: float = 1.0
    w_D: float = 1.0
    w_O: float = 1.0
    w_T: float = 1.0
    w_conf: float = 1.0

    def __post_init__(self):
        for name in ("w_m", "w_kc", "w_D", "w_O", "w_T", "w_conf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def get(self, term: str) -> float:
        return getattr(self, "w_" + term)


def focal_loss(pred, gt) -> float:
    """Penalty-reduced pixel-wise focal loss over a heatmap."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    pos = gt == 1.0
    pos_term = ((1.0 - p) ** FOCAL_ALPHA * np.log(p))[pos].sum()
    neg_term = ((1.0 - gt) ** FOCAL_BETA * p**FOCAL_ALPHA * np.log(1.0 - p))[~pos].sum()
    n = max(int(pos.sum()), 1)
    return float(-(pos_term + neg_term) / n)


def depth_weight(Z, alpha: float = DEPTH_ALPHA, a: float = DEPTH_KNEE):
    """Linear below ``a`` meters, logarithmic above; continuous at ``a``."""
    Z = np.asarray(Z, dtype=np.float64)
    out = np.where(Z < a, alpha * Z, np.log10(np.maximum(Z + 1.0 - a, 1e-300)) + alpha * a)
    return float(out) if out.ndim == 0 else out


def keypoint_loss(pred_kps, gt_kps, gt_depths, alpha: float = DEPTH_ALPHA, a: float = DEPTH_KNEE) -> float:
    """Depth-weighted L1 over all keypoints, averaged over objects."""
    pred = np.asarray(pred_kps, dtype=np.float64).reshape(-1, 9, 2)
    gt = np.asarray(gt_kps, dtype=np.float64).reshape(-1, 9, 2)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    n = pred.shape[0]
    if n == 0:
        return 0.0
    g = np.atleast_1d(depth_weight(np.asarray(gt_depths, dtype=np.float64).reshape(n), alpha, a))
    per_obj = np.abs(pred - gt).sum(axis=(1, 2))
    return float((g * per_obj).sum() / n)


def dimension_loss(pred_dims, gt_dims) -> float:
    pred = np.asarray(pred_dims, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_dims, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if len(pred) == 0:
        return 0.0
    return float(np.abs(pred - gt).sum() / len(pred))


def _log_softmax(logits):
    m = max(logits)
    lse = m + math.log(sum(math.exp(x - m) for x in logits))
    return [x - lse for x in logits]


def multibin_loss(pred, alpha: float) -> float:
    """Bin membership cross-entropy plus L1 on in-bin (sin, cos) residuals."""
    pred = np.asarray(pred, dtype=np.float64).reshape(8)
    loss = 0.0
    for b, member in enumerate(bin_membership(alpha)):
        o = 4 * b
        logp = _log_softmax(pred[o : o + 2])
        loss -= logp[1] if member else logp[0]
        if member:
            res = alpha - BIN_CENTERS[b]
            loss += abs(pred[o + 2] - math.sin(res)) + abs(pred[o + 3] - math.cos(res))
    return float(loss)


def position_loss(pred_T, gt_T, norm: str = "l2") -> float:
    pred = np.asarray(pred_T, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_T, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0:
        return 0.0
    diff = pred - gt
    if norm == "l2":
        per = np.linalg.norm(diff, axis=1)
    elif norm == "l1":
        per = np.abs(diff).sum(axis=1)
    else:
        raise ValueError(f"norm must be 'l2' or 'l1', got {norm!r}")
    return float(per.mean())


def bce(pred, target) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    if p.size == 0:
        return 0.0
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


@dataclass(eq=False)
class SupervisedBatch:
    """Matched predictions and targets for one image.

    Per-object arrays share the leading dimension N; ``pred_orient`` holds
    raw 8-vectors and ``pred_dims`` decoded (h, w, l) meters.
    """

    cam: CameraModel
    heat_pred: np.ndarray
    heat_gt: np.ndarray
    pred_kps: np.ndarray  # (N, 9, 2)
    pred_dims: np.ndarray  # (N, 3)
    pred_orient: np.ndarray  # (N, 8)
    pred_conf: np.ndarray  # (N,)
    gt_boxes: list  # ObjectBox3D with alpha set
    gt_kps: np.ndarray  # (N, 9, 2)
    masks: np.ndarray | None = None  # (N, 9) keypoint keep-masks


@dataclass
class LossBreakdown:
    total: float
    terms: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)


def supervised_loss(batch: SupervisedBatch, weights: LossWeights | None = None, position_norm: str = "l2") -> LossBreakdown:
    """Weighted multi-task loss; position goes through the GRM solve."""
    weights = weights or LossWeights()
    n = len(batch.gt_boxes)
    gt_T = np.array([b.T for b in batch.gt_boxes]).reshape(n, 3)
    gt_dims = np.array([b.dim.as_array() for b in batch.gt_boxes]).reshape(n, 3)
    terms = {
        "m": focal_loss(batch.heat_pred, batch.heat_gt),
        "kc": keypoint_loss(batch.pred_kps, batch.gt_kps, gt_T[:, 2]),
        "D": dimension_loss(batch.pred_dims, gt_dims),
        "O": (sum(multibin_loss(batch.pred_orient[i], batch.gt_boxes[i].alpha) for i in range(n)) / n) if n else 0.0,
    }
    pred_T, ious = [], []
    for i in range(n):
        dim = Dimension3D(*batch.pred_dims[i])
        mask = None if batch.masks is None else batch.masks[i]
        kps = KeypointSet(batch.pred_kps[i], mask)
        theta = alpha_to_theta(decode_orientation(batch.pred_orient[i]), kps.pts[8], batch.cam)
        T = solve_full(kps, dim, theta, batch.cam).T
        pred_T.append(T)
        ious.append(min(max(iou_3d(ObjectBox3D(dim, theta, T), batch.gt_boxes[i]), 0.0), 1.0))
    terms["T"] = position_loss(np.array(pred_T).reshape(n, 3), gt_T, position_norm)
    terms["conf"] = bce(batch.pred_conf, ious)
    weighted = {k: weights.get(k) * v for k, v in terms.items()}
    return LossBreakdown(float(sum(weighted.values())), terms, weighted)


def rampup(t: float, length: float = RAMPUP_EPOCHS) -> float:
    """Gaussian ramp-up exp(-5 (1 - t/length)^2), held at 1 after ``length``."""
    x = 1.0 - min(max(float(t), 0.0), length) / length
    return math.exp(-5.0 * x * x)


def semi_supervised_loss(sup: float, unsup: float, t: float) -> float:
    return sup + rampup(t) * unsup


@dataclass
class ConsistencyResult:
    loss: float
    position: float = 0.0
    orientation: float = 0.0
    dimension: float = 0.0
    pairs: list = field(default_factory=list)


def match_centers(centers_a, centers_b, radius: float = MATCH_RADIUS) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by ascending center distance."""
    cand = []
    for i, ca in enumerate(centers_a):
        for j, cb in enumerate(centers_b):
            d = float(np.hypot(*(np.asarray(ca) - np.asarray(cb))))
            if d <= radius:
                cand.append((d, i, j))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return pairs


def consistency_loss(preds_a, aug_a, preds_b, aug_b, cam: CameraModel, match_radius: float = MATCH_RADIUS) -> ConsistencyResult:
    """MSE between two augmented views after mapping both back to the canonical frame.

    Per matched pair the position, orientation (sin/cos embedding of alpha)
    and dimension MSEs are summed with equal weight; the loss is the mean
    over pairs, 0 when nothing matches.
    """
    ca = dealign(preds_a, aug_a, cam)
    cb = dealign(preds_b, aug_b, cam)
    pairs = match_centers([p.center for p in ca], [p.center for p in cb], match_radius)
    if not pairs:
        return ConsistencyResult(0.0)
    pos = ori = dim = 0.0
    for i, j in pairs:
        pa, pb = ca[i], cb[j]
        pos += float(np.mean((pa.position - pb.position) ** 2))
        ea = np.array([math.sin(pa.alpha), math.cos(pa.alpha)])
        eb = np.array([math.sin(pb.alpha), math.cos(pb.alpha)])
        ori += float(np.mean((ea - eb) ** 2))
        dim += float(np.mean((pa.dim.as_array() - pb.dim.as_array()) ** 2))
    n = len(pairs)
    pos, ori, dim = pos / n, ori / n, dim / n
    return ConsistencyResult(pos + ori + dim, pos, ori, dim, pairs)

