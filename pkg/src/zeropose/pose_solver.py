"""Robust 6D pose from 2D-3D correspondences.

solve_pnp implements the EPnP control-point scheme (four control points,
three in the planar configuration), candidate betas recovered from the
kernel of M^T M with a short Gauss-Newton polish, closed with ten
Gauss-Newton steps on the reprojection error. ransac_pnp wraps it in a
seeded hypothesize-and-verify loop with the classic adaptive iteration
bound and a final refit on the consensus set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateConfiguration, NoConsensus, NoValidSolution,
                     TooFewCorrespondences)
from .geometry import CameraIntrinsics, Pose, rotation_about_axis
from .matching import CorrespondenceSet

_PLANAR_RATIO = 1e-6
_MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 1000
    inlier_threshold_px: float = 3.0
    confidence: float = 0.99
    min_sample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")
        if self.min_sample != 4:
            raise ValueError("minimal sample size is fixed at 4")


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inlier_indices: tuple[int, ...]
    mean_inlier_reproj_px: float
    num_ransac_iters_run: int


def reprojection_errors(pose: Pose, object_pts: np.ndarray, image_pts: np.ndarray,
                        K: CameraIntrinsics) -> np.ndarray:
    """Per-point pixel error; points at or behind the camera get +inf."""
    cam = pose.apply(object_pts)
    z = cam[:, 2]
    ok = z > _MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    u = K.fx * cam[:, 0] / zs + K.cx
    v = K.fy * cam[:, 1] / zs + K.cy
    err = np.hypot(u - image_pts[:, 0], v - image_pts[:, 1])
    err[~ok] = np.inf
    return err


# --- EPnP ------------------------------------------------------------------------


def _control_points(obj: np.ndarray, planar: bool):
    c0 = obj.mean(axis=0)
    centered = obj - c0
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = s / math.sqrt(len(obj))
    n_ctrl = 3 if planar else 4
    ctrl = [c0]
    for k in range(n_ctrl - 1):
        ctrl.append(c0 + scale[k] * vt[k])
    return np.stack(ctrl)


def _barycentric(obj: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """alphas (n, m) with obj_i = sum_j alphas_ij ctrl_j and rows summing to 1."""
    m = len(ctrl)
    ch = np.vstack([ctrl.T, np.ones(m)])       # (4, m)
    rhs = np.vstack([obj.T, np.ones(len(obj))])  # (4, n)
    if m == 4:
        return np.linalg.solve(ch, rhs).T
    return np.linalg.lstsq(ch, rhs, rcond=None)[0].T


def _build_m(alphas, img, K):
    n, m = alphas.shape
    mat = np.zeros((2 * n, 3 * m))
    mat[0::2, 0::3] = alphas * K.fx
    mat[0::2, 2::3] = alphas * (K.cx - img[:, 0])[:, None]
    mat[1::2, 1::3] = alphas * K.fy
    mat[1::2, 2::3] = alphas * (K.cy - img[:, 1])[:, None]
    return mat


def _pair_indices(m):
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def _beta_candidates(kernel_dv, rho):
    """Initial beta vectors from the linearized distance constraints.

    kernel_dv: (n_pairs, n_kernel, 3) control-point differences per kernel
    vector. Follows the classic three approximations (kernel rank 1, 2, 3)
    with sign fix-ups; every candidate is polished afterwards.
    """
    n_pairs, n_kernel, _ = kernel_dv.shape
    dots = np.einsum("pad,pbd->pab", kernel_dv, kernel_dv)  # (n_pairs, nk, nk)
    candidates = []

    # rank-1: products with beta_1 only
    cols = dots[:, 0, 0][:, None]
    x, *_ = np.linalg.lstsq(cols, rho, rcond=None)
    b = np.zeros(n_kernel)
    b[0] = math.sqrt(abs(x[0]))
    candidates.append(b)

    if n_kernel >= 2:
        # products [b11, b12, b22]
        cols = np.stack([dots[:, 0, 0], 2 * dots[:, 0, 1], dots[:, 1, 1]], axis=1)
        x, *_ = np.linalg.lstsq(cols, rho, rcond=None)
        b = np.zeros(n_kernel)
        if x[0] < 0:
            b[0] = math.sqrt(-x[0])
            b[1] = math.sqrt(-x[2]) if x[2] < 0 else 0.0
        else:
            b[0] = math.sqrt(x[0])
            b[1] = math.sqrt(x[2]) if x[2] > 0 else 0.0
        if x[1] < 0:
            b[0] = -b[0]
        candidates.append(b)

    if n_kernel >= 3:
        # products [b11, b12, b22, b13, b23]
        cols = np.stack([dots[:, 0, 0], 2 * dots[:, 0, 1], dots[:, 1, 1],
                         2 * dots[:, 0, 2], 2 * dots[:, 1, 2]], axis=1)
        x, *_ = np.linalg.lstsq(cols, rho, rcond=None)
        b = np.zeros(n_kernel)
        if x[0] < 0:
            b[0] = math.sqrt(-x[0])
            b[1] = math.sqrt(-x[2]) if x[2] < 0 else 0.0
        else:
            b[0] = math.sqrt(x[0])
            b[1] = math.sqrt(x[2]) if x[2] > 0 else 0.0
        if x[1] < 0:
            b[0] = -b[0]
        if abs(b[0]) > 1e-12:
            b[2] = x[3] / b[0]
        candidates.append(b)

    if n_kernel >= 4:
        # products [b11, b12, b13, b14], assuming beta_1 dominates
        cols = np.stack([dots[:, 0, 0], 2 * dots[:, 0, 1],
                         2 * dots[:, 0, 2], 2 * dots[:, 0, 3]], axis=1)
        x, *_ = np.linalg.lstsq(cols, rho, rcond=None)
        b = np.zeros(n_kernel)
        sign = -1.0 if x[0] < 0 else 1.0
        b[0] = math.sqrt(abs(x[0]))
        if b[0] > 1e-12:
            b[1:4] = sign * x[1:4] / b[0]
        candidates.append(b)

    return candidates


def _refine_betas(betas, kernel_dv, rho, iters=8):
    """Gauss-Newton on the control-point distance residuals."""
    b = betas.copy()
    for _ in range(iters):
        dc = np.einsum("a,pad->pd", b, kernel_dv)         # (n_pairs, 3)
        resid = rho - (dc * dc).sum(axis=1)
        jac = 2.0 * np.einsum("pd,pad->pa", dc, kernel_dv)  # (n_pairs, nk)
        try:
            delta, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        except np.linalg.LinAlgError:
            break
        b = b + delta
        if np.abs(delta).max() < 1e-14:
            break
    return b


def _kabsch(world: np.ndarray, cam: np.ndarray):
    """Rigid transform with cam ~= R @ world + t and det(R) = +1."""
    wc = world.mean(axis=0)
    cc = cam.mean(axis=0)
    h = (world - wc).T @ (cam - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cc - r @ wc


def _mean_reproj(r, t, obj, img, K):
    cam = obj @ r.T + t
    z = cam[:, 2]
    if np.any(z <= _MIN_DEPTH):
        return np.inf
    u = K.fx * cam[:, 0] / z + K.cx
    v = K.fy * cam[:, 1] / z + K.cy
    return float(np.hypot(u - img[:, 0], v - img[:, 1]).mean())


def _refine_pose_gn(r, t, obj, img, K, iters=10):
    """Gauss-Newton on pixel reprojection error over (rotation, translation)."""
    r = r.copy()
    t = t.copy()
    err = _mean_reproj(r, t, obj, img, K)
    for _ in range(iters):
        rotated = obj @ r.T
        cam = rotated + t
        z = cam[:, 2]
        if np.any(z <= _MIN_DEPTH):
            break
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
        resid = np.concatenate([u - img[:, 0], v - img[:, 1]])

        n = len(obj)
        jac = np.zeros((2 * n, 6))
        fxz = K.fx / z
        fyz = K.fy / z
        # d(uv)/d(cam point)
        du = np.stack([fxz, np.zeros(n), -fxz * cam[:, 0] / z], axis=1)
        dv = np.stack([np.zeros(n), fyz, -fyz * cam[:, 1] / z], axis=1)
        # cam = exp(dw) @ (R p) + (t + dt); d(cam)/d(dw) = -[R p]_x
        sx, sy, sz = rotated[:, 0], rotated[:, 1], rotated[:, 2]
        zeros = np.zeros(n)
        skew = np.stack([
            np.stack([zeros, sz, -sy], axis=1),
            np.stack([-sz, zeros, sx], axis=1),
            np.stack([sy, -sx, zeros], axis=1),
        ], axis=1)  # (n, 3, 3) rows = d(cam_k)/d(dw)
        jac[:n, :3] = np.einsum("nk,nkw->nw", du, skew)
        jac[n:, :3] = np.einsum("nk,nkw->nw", dv, skew)
        jac[:n, 3:] = du
        jac[n:, 3:] = dv

        try:
            delta, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        improved = False
        for _ in range(6):
            dw = step * delta[:3]
            dt = step * delta[3:]
            angle = np.linalg.norm(dw)
            rot = rotation_about_axis(dw, angle) if angle > 1e-15 else np.eye(3)
            r_new = rot @ r
            t_new = t + dt
            err_new = _mean_reproj(r_new, t_new, obj, img, K)
            if err_new < err:
                r, t, err = r_new, t_new, err_new
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    # guard against drift accumulated over the exponential-map updates
    u, _, vt = np.linalg.svd(r)
    return u @ vt, t, err


def solve_pnp(object_pts, image_pts, K: CameraIntrinsics) -> Pose:
    """Camera pose from >= 4 non-collinear 3D-2D correspondences.

    Uses four EPnP control points, or three when the 3D points are planar
    (smallest singular value below 1e-6 of the largest). All candidate
    solutions are scored by reprojection after enforcing cheirality; the
    winner gets ten Gauss-Newton steps on the reprojection error.
    """
    obj = np.asarray(object_pts, dtype=np.float64).reshape(-1, 3)
    img = np.asarray(image_pts, dtype=np.float64).reshape(-1, 2)
    if len(obj) != len(img):
        raise ValueError("object and image point counts differ")
    if len(obj) < 4 or len(np.unique(obj, axis=0)) < 4:
        raise DegenerateConfiguration(
            f"need at least 4 distinct 3D points, got {len(np.unique(obj, axis=0))}")

    centered = obj - obj.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[0] <= 0 or svals[1] < _PLANAR_RATIO * svals[0]:
        raise DegenerateConfiguration("3D points are collinear or coincident")
    planar = svals[2] < _PLANAR_RATIO * svals[0]

    ctrl = _control_points(obj, planar)
    m = len(ctrl)
    alphas = _barycentric(obj, ctrl)
    mat = _build_m(alphas, img, K)
    _, evecs = np.linalg.eigh(mat.T @ mat)
    n_kernel = 3 if planar else 4
    kernel = evecs[:, :n_kernel]  # columns sorted by ascending eigenvalue

    pairs = _pair_indices(m)
    rho = np.array([float(((ctrl[i] - ctrl[j]) ** 2).sum()) for i, j in pairs])
    kernel_pts = kernel.T.reshape(n_kernel, m, 3)
    kernel_dv = np.stack([[kernel_pts[a, i] - kernel_pts[a, j] for a in range(n_kernel)]
                          for i, j in pairs])  # (n_pairs, n_kernel, 3)

    best = None
    for betas in _beta_candidates(kernel_dv, rho):
        betas = _refine_betas(betas, kernel_dv, rho)
        cc = (kernel @ betas).reshape(m, 3)
        for sign in (1.0, -1.0):
            pc = alphas @ (sign * cc)
            if (pc[:, 2] <= 0).sum() > len(pc) // 2:
                continue
            r, t = _kabsch(obj, pc)
            err = _mean_reproj(r, t, obj, img, K)
            if not np.isfinite(err):
                continue
            if best is None or err < best[0]:
                best = (err, r, t)
    if best is None:
        raise NoValidSolution("no candidate pose places all points in front of the camera")

    _, r, t = best
    r, t, _ = _refine_pose_gn(r, t, obj, img, K)
    cam_z = (obj @ r.T + t)[:, 2]
    if np.any(cam_z <= _MIN_DEPTH):
        raise NoValidSolution("refined pose leaves points behind the camera")
    return Pose(r, t)


# --- RANSAC ------------------------------------------------------------------------


def _sample_rng(seed: int, iteration: int) -> np.random.Generator:
    # per-iteration stream: reproducible and order-independent
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


def ransac_pnp(corr: CorrespondenceSet, K: CameraIntrinsics,
               params: RansacParams = RansacParams()) -> PoseEstimate:
    """Seeded RANSAC over 4-point PnP hypotheses with adaptive termination.

    Stops early once enough iterations ran that a fully-inlier sample was
    drawn with the configured confidence (the Fischler-Bolles bound
    (1 - w^4)^k <= 1 - confidence, w = best inlier ratio). The best
    hypothesis is refit on its consensus set. Deterministic given the seed.
    """
    obj = corr.object_pts
    img = corr.query_px
    n = len(obj)
    if n < 4:
        raise TooFewCorrespondences(f"RANSAC needs >= 4 correspondences, got {n}")

    thr = params.inlier_threshold_px
    best_count = 0
    best_pose = None
    best_mask = None
    needed = params.max_iterations
    iters = 0
    while iters < min(params.max_iterations, needed):
        sample = _sample_rng(params.seed, iters).choice(n, size=4, replace=False)
        iters += 1
        try:
            pose = solve_pnp(obj[sample], img[sample], K)
        except (DegenerateConfiguration, NoValidSolution):
            continue
        errs = reprojection_errors(pose, obj, img, K)
        mask = errs <= thr
        count = int(mask.sum())
        if count > best_count:
            best_count, best_pose, best_mask = count, pose, mask
            w = count / n
            miss = 1.0 - w ** 4
            if miss <= 1e-12:
                needed = iters
            else:
                needed = int(math.ceil(math.log(1.0 - params.confidence) / math.log(miss)))

    if best_pose is None or best_count < 4:
        raise NoConsensus(f"best hypothesis explains {best_count} < 4 correspondences")

    # refit on the consensus set; keep the hypothesis if the refit loses inliers
    pose = best_pose
    mask = best_mask
    try:
        refined = solve_pnp(obj[best_mask], img[best_mask], K)
        refined_mask = reprojection_errors(refined, obj, img, K) <= thr
        if int(refined_mask.sum()) >= best_count:
            pose = refined
            mask = refined_mask
    except (DegenerateConfiguration, NoValidSolution):
        pass

    errs = reprojection_errors(pose, obj, img, K)
    inliers = np.flatnonzero(mask)
    return PoseEstimate(
        pose=pose,
        inlier_indices=tuple(int(i) for i in inliers),
        mean_inlier_reproj_px=float(errs[inliers].mean()),
        num_ransac_iters_run=iters,
    )
