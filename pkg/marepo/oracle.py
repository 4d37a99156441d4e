"""Classical pose solver over 2D-3D correspondences: DLT, Gauss-Newton refinement and RANSAC."""
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from errors import DegenerateConfiguration, NoConsensus, SingularNormalEquations, TooFewPoints
from geometry import CELL_OFFSET, MIN_DEPTH, Pose, pose_inverse

MIN_POINTS = 6
DEGENERATE_RATIO = 1e-8
MIN_COST_DECREASE = 1e-12
MAX_HALVINGS = 30


@dataclass(frozen=True)
class Correspondence:
    u: float
    v: float
    p: tuple

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.u, self.v, *self.p)):
            raise ValueError('Correspondence must be finite')


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 2.0  # grid units
    max_iters: int = 1000
    confidence: float = 0.999
    seed: int = 0
    refine_iters: int = 20

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError(f'threshold must be > 0, got {self.threshold}')
        if self.max_iters < 1:
            raise ValueError(f'max_iters must be >= 1, got {self.max_iters}')
        if not 0 < self.confidence < 1:
            raise ValueError(f'confidence must lie in (0, 1), got {self.confidence}')

    @staticmethod
    def from_config(config):
        return RansacConfig(config['ransac_threshold'], config['ransac_max_iters'], config['ransac_confidence'],
                            config['ransac_seed'], config['ransac_refine_iters'])


def as_arrays(corrs):
    """(uv (n, 2), points (n, 3)) from a list of Correspondence."""
    uv = np.array([[c.u, c.v] for c in corrs], dtype=np.float64).reshape(-1, 2)
    points = np.array([c.p for c in corrs], dtype=np.float64).reshape(-1, 3)
    return uv, points


def correspondences_from_scm(scm, max_corrs=None):
    """Cell-center image coordinates and scene points of the valid cells, in row-major order.

    When there are more than max_corrs valid cells an evenly spaced subset is kept.
    """
    v, u = np.nonzero(scm.mask)
    uv = np.column_stack([u + CELL_OFFSET, v + CELL_OFFSET]).astype(np.float64)
    points = scm.coords[scm.mask]
    if max_corrs is not None and len(uv) > max_corrs:
        keep = np.unique(np.linspace(0, len(uv) - 1, max_corrs).round().astype(np.int64))
        uv, points = uv[keep], points[keep]
    return uv, points


def _normalize_points(x):
    """Similarity transform moving the centroid to the origin with mean distance sqrt(dim)."""
    dim = x.shape[1]
    centroid = x.mean(axis=0)
    dist = np.linalg.norm(x - centroid, axis=1).mean()
    scale = math.sqrt(dim) / dist if dist > 0 else 1.0
    T = np.eye(dim + 1)
    T[:dim, :dim] *= scale
    T[:dim, dim] = -scale * centroid
    return T


def _camera_from_scene(pose):
    inv = pose_inverse(pose)
    return inv.R, inv.t


def reprojection_errors(pose, uv, points, K):
    """Pixel distances in grid units; points at or behind the camera get inf."""
    R, t = _camera_from_scene(pose)
    p_cam = points @ R.T + t
    z = p_cam[:, 2]
    front = z > MIN_DEPTH
    err = np.full(len(points), np.inf)
    u = K.fx * p_cam[front, 0] / z[front] + K.cx
    v = K.fy * p_cam[front, 1] / z[front] + K.cy
    err[front] = np.hypot(u - uv[front, 0], v - uv[front, 1])
    return err


def dlt_pnp(uv, points, K):
    """Camera-to-scene pose from >= 6 correspondences by the direct linear transform."""
    uv = np.asarray(uv, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < MIN_POINTS:
        raise TooFewPoints(f'DLT needs at least {MIN_POINTS} correspondences, got {n}')

    x = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy])
    T2 = _normalize_points(x)
    T3 = _normalize_points(points)
    xn = x @ T2[:2, :2].T + T2[:2, 2]
    Xn = np.column_stack([points @ T3[:3, :3].T + T3[:3, 3], np.ones(n)])

    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -xn[:, 0:1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -xn[:, 1:2] * Xn
    _, s, Vt = np.linalg.svd(A)
    if s[0] <= 0 or s[-2] / s[0] <= DEGENERATE_RATIO:
        raise DegenerateConfiguration('Correspondences do not determine a unique camera matrix')

    P = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3
    X = np.column_stack([points, np.ones(n)])
    depths = X @ P[2]
    if np.count_nonzero(depths > 0) < n / 2:
        P = -P

    U, S, Vt = np.linalg.svd(P[:, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:
        raise DegenerateConfiguration('DLT camera matrix has a reflection')
    t = P[:, 3] / S.mean()
    return pose_inverse(Pose(R, t))


def _residuals(R, t, uv, points, K):
    p_cam = points @ R.T + t
    z = p_cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        return None, p_cam
    r = np.column_stack([K.fx * p_cam[:, 0] / z + K.cx - uv[:, 0], K.fy * p_cam[:, 1] / z + K.cy - uv[:, 1]])
    return r, p_cam


def _cost(R, t, uv, points, K):
    r, _ = _residuals(R, t, uv, points, K)
    return math.inf if r is None else float(np.sum(r ** 2))


def _normal_equations(R, t, uv, points, K):
    r, p_cam = _residuals(R, t, uv, points, K)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    zeros = np.zeros_like(z)
    # d(u, v) / d p_cam
    J_proj = np.stack([
        np.stack([K.fx / z, zeros, -K.fx * x / z ** 2], axis=-1),
        np.stack([zeros, K.fy / z, -K.fy * y / z ** 2], axis=-1)], axis=1)
    # left perturbation: d p_cam / d omega = -[R p]x, d p_cam / d delta_t = I
    q = points @ R.T
    skew = np.zeros((len(q), 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -q[:, 2], q[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = q[:, 2], -q[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -q[:, 1], q[:, 0]
    J_pose = np.concatenate([-skew, np.broadcast_to(np.eye(3), skew.shape)], axis=2)
    J = (J_proj @ J_pose).reshape(-1, 6)
    H = J.T @ J
    g = J.T @ r.reshape(-1)
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e14:
        raise SingularNormalEquations('Gauss-Newton normal equations are singular')
    return np.linalg.solve(H, -g)


def refine_pnp(init, uv, points, K, iters=20, return_costs=False):
    """Gauss-Newton on the squared reprojection error with step halving.

    The cost sequence is non-increasing. Singular normal equations end the refinement with
    the best pose found so far.
    """
    uv = np.asarray(uv, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if len(points) < MIN_POINTS:
        raise TooFewPoints(f'Refinement needs at least {MIN_POINTS} correspondences, got {len(points)}')
    R, t = _camera_from_scene(init)
    cost = _cost(R, t, uv, points, K)
    costs = [cost]
    if not math.isfinite(cost):
        return (init, costs) if return_costs else init

    for _ in range(iters):
        try:
            delta = _normal_equations(R, t, uv, points, K)
        except (SingularNormalEquations, np.linalg.LinAlgError):
            break
        step = 1.0
        for _ in range(MAX_HALVINGS):
            R_new = Rotation.from_rotvec(step * delta[:3]).as_matrix() @ R
            t_new = t + step * delta[3:]
            new_cost = _cost(R_new, t_new, uv, points, K)
            if new_cost <= cost:
                break
            step *= 0.5
        else:
            break
        decrease = cost - new_cost
        R, t, cost = R_new, t_new, new_cost
        costs.append(cost)
        if decrease < MIN_COST_DECREASE:
            break

    pose = pose_inverse(Pose(R, t))
    return (pose, costs) if return_costs else pose


def _required_iterations(inlier_ratio, confidence):
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio ** MIN_POINTS
    if p_good <= 0:
        return math.inf
    return math.ceil(math.log(1 - confidence) / math.log(1 - p_good))


def ransac_pnp(uv, points, K, cfg=None):
    """Robust pose and inlier flags; deterministic for a fixed cfg.seed."""
    cfg = RansacConfig() if cfg is None else cfg
    uv = np.asarray(uv, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < MIN_POINTS:
        raise TooFewPoints(f'RANSAC needs at least {MIN_POINTS} correspondences, got {n}')

    rng = np.random.default_rng(cfg.seed)
    best_pose, best_inliers, best_count = None, None, 0
    needed = cfg.max_iters
    i = 0
    while i < min(needed, cfg.max_iters):
        i += 1
        sample = rng.choice(n, size=MIN_POINTS, replace=False)
        try:
            pose = dlt_pnp(uv[sample], points[sample], K)
        except DegenerateConfiguration:
            continue
        inliers = reprojection_errors(pose, uv, points, K) < cfg.threshold
        count = int(inliers.sum())
        if count > best_count:
            best_pose, best_inliers, best_count = pose, inliers, count
            needed = _required_iterations(count / n, cfg.confidence)

    if best_count < MIN_POINTS:
        raise NoConsensus(f'Best hypothesis has {best_count} inliers, need {MIN_POINTS}')

    try:
        pose = dlt_pnp(uv[best_inliers], points[best_inliers], K)
    except DegenerateConfiguration:
        pose = best_pose
    inliers = best_inliers
    for _ in range(2):
        pose = refine_pnp(pose, uv[inliers], points[inliers], K, iters=cfg.refine_iters)
        new_inliers = reprojection_errors(pose, uv, points, K) < cfg.threshold
        if np.array_equal(new_inliers, inliers) or new_inliers.sum() < MIN_POINTS:
            break
        inliers = new_inliers
    return pose, inliers


def localize_scm(scm, K, cfg=None, max_corrs=None):
    uv, points = correspondences_from_scm(scm, max_corrs)
    return ransac_pnp(uv, points, K, cfg)
