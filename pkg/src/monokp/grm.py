"""Geometric reasoning module: position from keypoints by linear least squares.

For a kept keypoint with normalized coordinates (x, y) and box-frame corner
(xc, yc, zc), the pinhole constraint rearranges to two linear rows in the
unknown position T' = T + t (t is the camera offset)::

    [-1, 0, x] . T' = xc cos + zc sin - x (-xc sin + zc cos)
    [0, -1, y] . T' = yc             - y (-xc sin + zc cos)

Stacking kept keypoints gives an overdetermined system solved through the
SVD pseudo-inverse.  Gradients are taken through the normal-equation form
(A^T A)^-1 A^T b, which has the same value and derivative for full-rank A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateSystem, InsufficientConstraints
from .geometry import (
    CORNER_SIGNS,
    NUM_KEYPOINTS,
    CameraModel,
    Dimension3D,
    KeypointSet,
    normalize_keypoints,
)

RANK_TOL = 1e-10
DEFAULT_DROP_PROB = 0.5


@dataclass(eq=False)
class LinearSystem:
    A: np.ndarray
    b: np.ndarray
    row_map: np.ndarray  # keypoint index owning each row pair


@dataclass(eq=False)
class PositionSolution:
    T: np.ndarray
    singular_values: np.ndarray
    residual: float
    mask: np.ndarray


@dataclass(eq=False)
class GrmGradients:
    """Jacobians of T plus the upstream-contracted gradients.

    ``dT_dkp`` columns are ordered (u1, v1, u2, v2, ..., u9, v9) in pixels;
    ``dT_ddim`` columns are (h, w, l).
    """

    dT_dkp: np.ndarray
    dT_ddim: np.ndarray
    dT_dtheta: np.ndarray
    grad_kp: np.ndarray
    grad_dim: np.ndarray
    grad_theta: float


def _corner_terms(dim, theta):
    dim = dim.as_array() if isinstance(dim, Dimension3D) else np.asarray(dim, dtype=np.float64)
    h, w, l = dim
    local = CORNER_SIGNS * np.array([l / 2.0, h / 2.0, w / 2.0])
    c, s = math.cos(theta), math.sin(theta)
    xc, yc, zc = local[:, 0], local[:, 1], local[:, 2]
    lateral = xc * c + zc * s
    depth = -xc * s + zc * c
    return xc, yc, zc, lateral, depth, c, s


def build_system(norm_kps, mask, dim, theta: float) -> LinearSystem:
    norm_kps = np.asarray(norm_kps, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
    mask = np.asarray(mask, dtype=bool).reshape(NUM_KEYPOINTS)
    idx = np.flatnonzero(mask)
    if idx.size < 2:
        raise InsufficientConstraints(f"need at least 2 kept keypoints, got {idx.size}")
    _, yc, _, lateral, depth, _, _ = _corner_terms(dim, theta)
    k = idx.size
    kx = norm_kps[idx, 0]
    ky = norm_kps[idx, 1]
    A = np.zeros((2 * k, 3))
    A[0::2, 0] = -1.0
    A[0::2, 2] = kx
    A[1::2, 1] = -1.0
    A[1::2, 2] = ky
    b = np.empty(2 * k)
    b[0::2] = lateral[idx] - kx * depth[idx]
    b[1::2] = yc[idx] - ky * depth[idx]
    return LinearSystem(A, b, idx)


def solve_position(system: LinearSystem) -> PositionSolution:
    """Least-squares T' = pinv(A) b via SVD."""
    U, sv, Vt = np.linalg.svd(system.A, full_matrices=False)
    if sv[-1] < RANK_TOL * sv[0]:
        raise DegenerateSystem(
            f"rank-deficient keypoint geometry (singular values {sv[0]:.3g} .. {sv[-1]:.3g})"
        )
    T = Vt.T @ ((U.T @ system.b) / sv)
    residual = float(np.linalg.norm(system.A @ T - system.b))
    mask = np.zeros(NUM_KEYPOINTS, dtype=bool)
    mask[system.row_map] = True
    return PositionSolution(T, sv, residual, mask)


def solve_full(kps: KeypointSet, dim, theta: float, cam: CameraModel) -> PositionSolution:
    """Box position in the camera frame from pixel keypoints, dimension and yaw."""
    system = build_system(normalize_keypoints(cam, kps.pts), kps.mask, dim, theta)
    sol = solve_position(system)
    sol.T = sol.T - cam.t
    if sol.T[2] <= 0:
        raise BehindCamera(f"solved depth Z={sol.T[2]:.4g} m is not in front of the camera")
    return sol


def _vjp(A, b, T, g):
    """Gradients of g . T with respect to A and b for T = (A^T A)^-1 A^T b."""
    lam = np.linalg.solve(A.T @ A, g)
    Alam = A @ lam
    r = b - A @ T
    dA = np.outer(r, lam) - np.outer(Alam, T)
    return dA, Alam


def grm_backward(kps: KeypointSet, dim, theta: float, cam: CameraModel, upstream=None) -> GrmGradients:
    """Analytic derivatives of the solved position.

    ``upstream`` is dL/dT; the contracted gradients grad_* equal
    upstream @ dT_d*.  Dropped keypoints get exactly zero columns.
    """
    if upstream is None:
        upstream = np.zeros(3)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(3)
    norm = normalize_keypoints(cam, kps.pts)
    system = build_system(norm, kps.mask, dim, theta)
    sol = solve_position(system)
    A, b, idx = system.A, system.b, system.row_map
    T = sol.T  # T' (camera-offset frame); dT/d* is the same for T

    xc, yc, zc, lateral, depth, c, s = _corner_terms(dim, theta)
    kx = norm[idx, 0]
    ky = norm[idx, 1]
    sx = CORNER_SIGNS[idx, 0]
    sy = CORNER_SIGNS[idx, 1]
    sz = CORNER_SIGNS[idx, 2]
    # derivative of depth wrt theta, and of lateral wrt theta
    d_depth = -xc[idx] * c - zc[idx] * s
    d_lateral = depth[idx]

    Kp = cam.K_inv[:2, :2]  # d(norm)/d(pixel)

    jac_kp = np.zeros((3, 2 * NUM_KEYPOINTS))
    jac_dim = np.zeros((3, 3))
    jac_theta = np.zeros(3)
    for out in range(3):
        e = np.zeros(3)
        e[out] = 1.0
        dA, db = _vjp(A, b, T, e)
        dbx, dby = db[0::2], db[1::2]
        # A[.,2] holds the normalized coordinate; b depends on it through -k*depth
        g_kx = dA[0::2, 2] - dbx * depth[idx]
        g_ky = dA[1::2, 2] - dby * depth[idx]
        g_norm = np.stack([g_kx, g_ky], axis=1)
        g_pix = g_norm @ Kp
        jac_kp[out, 2 * idx] = g_pix[:, 0]
        jac_kp[out, 2 * idx + 1] = g_pix[:, 1]

        jac_theta[out] = np.sum(dbx * (d_lateral - kx * d_depth)) + np.sum(dby * (-ky * d_depth))

        # dims ordered (h, w, l); xc = sx l/2, yc = sy h/2, zc = sz w/2
        d_h = np.sum(dby * sy / 2.0)
        d_w = np.sum(dbx * sz / 2.0 * (s - kx * c)) + np.sum(dby * (-ky) * sz / 2.0 * c)
        d_l = np.sum(dbx * sx / 2.0 * (c + kx * s)) + np.sum(dby * ky * sx / 2.0 * s)
        jac_dim[out] = (d_h, d_w, d_l)

    return GrmGradients(
        dT_dkp=jac_kp,
        dT_ddim=jac_dim,
        dT_dtheta=jac_theta,
        grad_kp=upstream @ jac_kp,
        grad_dim=upstream @ jac_dim,
        grad_theta=float(upstream @ jac_theta),
    )


def keypoint_dropout(rng: np.random.Generator, drop_prob: float = DEFAULT_DROP_PROB, min_keep: int = 2) -> np.ndarray:
    """Random keep-mask over the 9 keypoints with at least ``min_keep`` kept."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
    if not 2 <= min_keep <= NUM_KEYPOINTS:
        raise ValueError(f"min_keep must be in [2, 9], got {min_keep}")
    mask = rng.random(NUM_KEYPOINTS) >= drop_prob
    missing = min_keep - int(mask.sum())
    if missing > 0:
        dropped = np.flatnonzero(~mask)
        mask[rng.choice(dropped, size=missing, replace=False)] = True
    return mask
