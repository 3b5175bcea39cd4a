"""Independent reference machinery used to check the library.

Nothing here calls into the code it verifies: the position oracle runs
Gauss-Newton on pixel reprojection residuals straight from the 3x4 matrix,
the loss references are plain loops, and IoU is estimated by sampling.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .codec import HeadMaps, center_cell, encode_object
from .errors import FrustumExhausted, InsufficientConstraints, NoConvergence
from .geometry import CameraModel, Dimension3D, KeypointSet, ObjectBox3D, project_box, theta_to_alpha

DEFAULT_P2 = np.array(
    [
        [721.5377, 0.0, 609.5593, 44.85728],
        [0.0, 721.5377, 172.854, 0.2163791],
        [0.0, 0.0, 1.0, 0.002745884],
    ]
)
DEFAULT_IMAGE_SIZE = (1280, 384)  # width, height
PRIOR_HLW = (1.63, 1.53, 3.88)


# ---------------------------------------------------------------- scenes


@dataclass
class SceneSpec:
    seed: int = 0
    n_objects: int = 3
    dim_jitter: float = 0.3
    z_range: tuple = (4.0, 60.0)
    P: np.ndarray = field(default_factory=lambda: DEFAULT_P2.copy())
    image_size: tuple = DEFAULT_IMAGE_SIZE
    noise_sigma: float = 0.0
    min_corner_depth: float = 0.5
    min_cell_gap: int = 3
    stride: int = 4


@dataclass(eq=False)
class Scene:
    cam: object
    boxes: list
    keypoints: list  # exact KeypointSets
    noisy_keypoints: list
    centers: list  # 2D box centers, pixels
    maps: object
    spec: SceneSpec


def _corners_hand(dim_hwl, theta, T):
    """Box corners written out longhand (independent of geometry.local_corners)."""
    h, w, l = dim_hwl
    c, s = math.cos(theta), math.sin(theta)
    pts = []
    for sx, sy, sz in [(1, 1, 1), (1, 1, -1), (-1, 1, -1), (-1, 1, 1), (1, -1, 1), (1, -1, -1), (-1, -1, -1), (-1, -1, 1), (0, 0, 0)]:
        x, y, z = sx * l / 2, sy * h / 2, sz * w / 2
        pts.append((c * x + s * z + T[0], y + T[1], -s * x + c * z + T[2]))
    return np.array(pts)


def project_hand(P, pts):
    out = []
    for X in pts:
        q = [sum(P[r][k] * X[k] for k in range(3)) + P[r][3] for r in range(3)]
        out.append((q[0] / q[2], q[1] / q[2]))
    return np.array(out)


def sample_box(rng, spec: SceneSpec):
    """One (dims, theta, T) satisfying the frustum constraints, else None."""
    cam = CameraModel(spec.P)
    W, H = spec.image_size
    dims = np.array(PRIOR_HLW) * rng.uniform(1 - spec.dim_jitter, 1 + spec.dim_jitter, 3)
    theta = math.pi - rng.uniform(0.0, 2.0 * math.pi)
    Z = rng.uniform(*spec.z_range)
    u = rng.uniform(0, W - 1)
    X = (u - cam.cx) * Z / cam.fx
    Y = 1.65 - dims[0] / 2 + rng.uniform(-0.5, 0.5)
    T = np.array([X, Y, Z])
    world = _corners_hand(dims, theta, T) + cam.t
    if world[:, 2].min() <= spec.min_corner_depth:
        return None
    pix = project_hand(spec.P, _corners_hand(dims, theta, T))
    lo, hi = pix[:8].min(axis=0), pix[:8].max(axis=0)
    center = (lo + hi) / 2
    if not (0 <= center[0] < W and 0 <= center[1] < H):
        return None
    return dims, theta, T, center


def generate_scene(spec: SceneSpec) -> Scene:
    """Random boxes, their exact keypoints, and head maps encoding them."""
    rng = np.random.default_rng(spec.seed)
    cam = CameraModel(spec.P)
    W, H = spec.image_size
    gh, gw = H // spec.stride, W // spec.stride
    maps = HeadMaps.empty(gh, gw, 1, spec.stride)
    boxes, kps, noisy, centers, cells = [], [], [], [], []
    for n in range(spec.n_objects):
        for _ in range(1000):
            sample = sample_box(rng, spec)
            if sample is None:
                continue
            dims, theta, T, center = sample
            cell = center_cell(center, spec.stride)
            if not (0 <= cell[0] < gh and 0 <= cell[1] < gw):
                continue
            if any(max(abs(cell[0] - r), abs(cell[1] - c)) < spec.min_cell_gap for r, c in cells):
                continue
            break
        else:
            raise FrustumExhausted(f"could not place object {n} after 1000 draws")
        box0 = ObjectBox3D(Dimension3D(*dims), theta, T)
        k = project_box(cam, box0)
        alpha = theta_to_alpha(theta, k.pts[8], cam)
        box = ObjectBox3D(box0.dim, theta, T, alpha)
        noise = rng.normal(0.0, spec.noise_sigma, (9, 2)) if spec.noise_sigma > 0 else np.zeros((9, 2))
        boxes.append(box)
        kps.append(k)
        noisy.append(KeypointSet(k.pts + noise))
        centers.append(center)
        cells.append(cell)
        _splat(maps.main_center[:, :, 0], cell)
        encode_object(maps, cell[0], cell[1], noisy[-1], box.dim, alpha, 1.0)
    return Scene(cam, boxes, kps, noisy, centers, maps, spec)


def _splat(heat, cell, sigma: float = 1.0, radius: int = 2):
    r0, c0 = cell
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, c = r0 + dr, c0 + dc
            if 0 <= r < heat.shape[0] and 0 <= c < heat.shape[1]:
                heat[r, c] = max(heat[r, c], math.exp(-(dr * dr + dc * dc) / (2 * sigma * sigma)))


# ------------------------------------------------------ position oracle


@dataclass
class GaussNewtonResult:
    T: np.ndarray
    iterations: int
    residual: float


def gauss_newton_position(pts, mask, dim_hwl, theta, P, T0, max_iter: int = 100, tol: float = 1e-10) -> GaussNewtonResult:
    """Minimize the pixel reprojection error over T by Gauss-Newton.

    Step halving is applied whenever a full step does not reduce the cost.
    """
    pts = np.asarray(pts, dtype=np.float64)
    mask = np.ones(9, bool) if mask is None else np.asarray(mask, bool)
    if mask.sum() < 2:
        raise InsufficientConstraints("need at least 2 keypoints")
    P = np.asarray(P, dtype=np.float64)
    target = pts[mask]
    offsets = _corners_hand(dim_hwl, theta, (0.0, 0.0, 0.0))[mask]

    def residual_and_jac(T):
        X = offsets + T
        q = X @ P[:, :3].T + P[:, 3]
        u = q[:, :2] / q[:, 2:3]
        r = (u - target).ravel()
        J = np.empty((2 * len(X), 3))
        for a in range(2):
            J[a::2] = (P[a, :3][None, :] * q[:, 2:3] - q[:, a : a + 1] * P[2, :3][None, :]) / q[:, 2:3] ** 2
        return r, J

    T = np.asarray(T0, dtype=np.float64).copy()
    r, J = residual_and_jac(T)
    cost = r @ r
    for it in range(1, max_iter + 1):
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        while True:
            T_new = T + lam * step
            r_new, J_new = residual_and_jac(T_new)
            cost_new = r_new @ r_new
            if cost_new <= cost or lam < 1e-8:
                break
            lam *= 0.5
        T, r, J, cost = T_new, r_new, J_new, cost_new
        if np.linalg.norm(lam * step) < tol:
            return GaussNewtonResult(T, it, math.sqrt(cost))
    raise NoConvergence(f"no convergence after {max_iter} iterations", T, math.sqrt(cost))


# ------------------------------------------------------ finite differences


def finite_diff_gradients(fn, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector function at x."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=np.float64))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        J[:, i] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2.0 * step)
    return J


def relative_error(analytic, numeric, floor: float = 1e-3) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor * row scale).

    The row scale is the largest |n| in the same Jacobian row, so entries
    that vanish analytically are judged against the row's magnitude
    rather than against rounding noise.
    """
    a = np.atleast_2d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_2d(np.asarray(numeric, dtype=np.float64))
    scale = np.abs(n).max(axis=1, keepdims=True) * floor
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), np.maximum(scale, 1e-300))
    return np.abs(a - n) / denom


# ------------------------------------------------------ naive losses


def naive_focal_loss(pred, gt, eps: float = 1e-7) -> float:
    H, W = len(pred), len(pred[0])
    total, npos = 0.0, 0
    for i in range(H):
        for j in range(W):
            p = min(max(float(pred[i][j]), eps), 1.0 - eps)
            g = float(gt[i][j])
            if g == 1.0:
                total += (1.0 - p) ** 2 * math.log(p)
                npos += 1
            else:
                total += (1.0 - g) ** 4 * p**2 * math.log(1.0 - p)
    return -total / max(npos, 1)


def naive_multibin_loss(pred, alpha: float) -> float:
    total = 0.0
    for center, o in ((-math.pi / 2, 0), (math.pi / 2, 4)):
        d = (alpha - center + math.pi) % (2 * math.pi) - math.pi
        member = abs(d) <= 2 * math.pi / 3 + 1e-15
        l0, l1 = pred[o], pred[o + 1]
        z = math.log(math.exp(l0) + math.exp(l1))
        total += (z - l1) if member else (z - l0)
        if member:
            total += abs(pred[o + 2] - math.sin(alpha - center)) + abs(pred[o + 3] - math.cos(alpha - center))
    return total


# ------------------------------------------------------ peaks


def naive_peaks(heat, threshold: float = 0.4):
    """Neighborhood scan peak finder returning sorted (cls, row, col, score)."""
    H, W, C = heat.shape
    out = []
    for k in range(C):
        for r in range(H):
            for c in range(W):
                v = heat[r, c, k]
                if v < threshold:
                    continue
                ok = True
                for rr in range(max(r - 1, 0), min(r + 2, H)):
                    for cc in range(max(c - 1, 0), min(c + 2, W)):
                        if (rr, cc) == (r, c):
                            continue
                        nv = heat[rr, cc, k]
                        if nv > v or (nv == v and (rr, cc) < (r, c)):
                            ok = False
                if ok:
                    out.append((k, r, c, float(v)))
    out.sort(key=lambda t: (-t[3], t[0], t[1], t[2]))
    return out


# ------------------------------------------------------ Monte-Carlo IoU


@dataclass
class MonteCarloEstimate:
    value: float
    stderr: float


def _inside(points, center, dims_hwl, yaw):
    h, w, l = dims_hwl
    d = points - np.asarray(center)
    c, s = math.cos(yaw), math.sin(yaw)
    # inverse of rotation about y: local x = c dx - s dz, local z = s dx + c dz
    lx = c * d[:, 0] - s * d[:, 2]
    lz = s * d[:, 0] + c * d[:, 2]
    return (np.abs(lx) <= l / 2) & (np.abs(d[:, 1]) <= h / 2) & (np.abs(lz) <= w / 2)


def monte_carlo_iou3d(a, b, n: int = 1_000_000, rng=None, sampler: str = "sobol", chunk: int = 262_144) -> MonteCarloEstimate:
    """IoU by uniform sampling over the axis-aligned bounds of both boxes.

    ``a`` and ``b`` are (center xyz, dims hwl, yaw) triples.  ``sampler`` is
    "sobol" (scrambled low-discrepancy points, n rounded up to a power of
    two) or "random" (i.i.d. uniform).  ``stderr`` is the binomial standard
    error of the ratio estimator, which is conservative for "sobol".
    """
    if n < 10_000:
        raise ValueError("need at least 1e4 samples")
    rng = np.random.default_rng(0) if rng is None else rng
    corners = np.vstack([_corners_hand(a[1], a[2], a[0]), _corners_hand(b[1], b[2], b[0])])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    if sampler == "sobol":
        engine = qmc.Sobol(3, scramble=True, seed=rng)
        m = int(math.ceil(math.log2(n)))
        batches = (engine.random_base2(m),)
    elif sampler == "random":
        batches = (rng.random((min(chunk, n - k), 3)) for k in range(0, n, chunk))
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    both = either = 0
    for u in batches:
        p = lo + (hi - lo) * u
        ia = _inside(p, *a)
        ib = _inside(p, *b)
        both += int(np.count_nonzero(ia & ib))
        either += int(np.count_nonzero(ia | ib))
    if either == 0:
        return MonteCarloEstimate(0.0, 0.0)
    v = both / either
    return MonteCarloEstimate(v, math.sqrt(v * (1 - v) / either))


# ------------------------------------------------------ brute-force AP


def brute_force_ap(dets, gts, ious, threshold: float, sampling: int) -> float:
    """AP for a single image without ignored ground truth.

    dets: list of scores; gts: count; ious[i][j] overlap of det i and gt j.
    Every partial one-to-one assignment above threshold is enumerated and
    the one greedy-by-score would pick is selected: the lexicographically
    best sequence of matched IoUs in score order (ties to lower gt index).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i])
    best_key, best_assign = None, None
    n_gt = gts
    options = [[None] + [j for j in range(n_gt) if ious[i][j] >= threshold] for i in order]
    for combo in itertools.product(*options):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)):
            continue
        key = []
        for i, j in zip(order, combo):
            key.append((ious[i][j], -j) if j is not None else (-1.0, 0))
        key = tuple(key)
        if best_key is None or key > best_key:
            best_key, best_assign = key, combo
    if n_gt == 0:
        return float("nan")
    tp_flags = [j is not None for j in best_assign] if best_assign is not None else []
    prec, rec = [], []
    for k in range(1, len(order) + 1):
        tp = sum(tp_flags[:k])
        prec.append(tp / k)
        rec.append(tp / n_gt)
    if sampling == 11:
        pts = [i / 10 for i in range(11)]
    else:
        pts = [i / 40 for i in range(1, 41)]
    total = 0.0
    for r in pts:
        cands = [p for p, rr in zip(prec, rec) if rr >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / len(pts)
