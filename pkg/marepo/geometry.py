import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation

from errors import BehindCamera, DegenerateAxes, DegenerateMatrix, NotARotation

RAY_SCALE = 400.0  # lambda in the ray components
CELL_OFFSET = 0.5  # epsilon, offset from cell index to cell center
MIN_DEPTH = 1e-6
DEGENERATE_EPS = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters in coordinate-map grid units."""
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        values = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(x) for x in values):
            raise ValueError(f'Intrinsics must be finite: {values}')
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f'Focal lengths must be positive: fx={self.fx}, fy={self.fy}')

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    def as_tensor(self, dtype=torch.float32, device=None):
        return torch.tensor([self.fx, self.fy, self.cx, self.cy], dtype=dtype, device=device)

    @staticmethod
    def from_array(x):
        fx, fy, cx, cy = (float(v) for v in x)
        return Intrinsics(fx, fy, cx, cy)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-scene rigid transform, x_scene = R x_cam + t."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'R', np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, 't', np.asarray(self.t, dtype=np.float64).reshape(3))

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return Pose(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def is_valid(self, tol=1e-9):
        R = self.R
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(self.t))):
            return False
        return np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol

    def check(self, tol=1e-9):
        if not self.is_valid(tol):
            raise NotARotation(f'Pose rotation is not orthonormal with det +1 (tol={tol})')
        return self


@dataclass(frozen=True)
class PoseError:
    trans_err: float  # meters
    rot_err: float  # degrees


def ray_xy(K, u, v):
    # works elementwise on python scalars, numpy arrays and torch tensors alike
    x_ray = RAY_SCALE * (u - K.cx - CELL_OFFSET) / K.fx
    y_ray = RAY_SCALE * (v - K.cy - CELL_OFFSET) / K.fy
    return x_ray, y_ray


def cell_ray(K, u, v):
    """Camera-frame direction (z = 1) through the center of grid cell (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + CELL_OFFSET - K.cx) / K.fx
    y = (v + CELL_OFFSET - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def rot6d_to_matrix(r):
    """Maps (..., 6) vectors [a1, a2] to rotations whose first two columns are a1, a2 orthonormalized."""
    r = torch.as_tensor(r)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = torch.linalg.norm(a1, dim=-1, keepdim=True)
    if torch.any(n1 < DEGENERATE_EPS):
        raise DegenerateAxes('First 6D axis has (near) zero norm')
    b1 = a1 / n1
    a2_perp = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.norm(a2_perp, dim=-1, keepdim=True)
    if torch.any(n2 < DEGENERATE_EPS):
        raise DegenerateAxes('Second 6D axis is (near) parallel to the first')
    b2 = a2_perp / n2
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def rot9d_to_matrix(m):
    """Projects (..., 3, 3) matrices onto SO(3) with SVD."""
    m = torch.as_tensor(m)
    U, S, Vh = torch.linalg.svd(m)
    if torch.any(S[..., -1] < DEGENERATE_EPS):
        raise DegenerateMatrix('9D rotation matrix is rank deficient')
    det = torch.det(U @ Vh)
    ones = torch.ones_like(det)
    D = torch.diag_embed(torch.stack([ones, ones, det], dim=-1))
    return U @ D @ Vh


def homog_to_translation(q):
    q = torch.as_tensor(q)
    w = F.softplus(q[..., 3:4])
    return q[..., :3] / w


def pose_compose(A, B):
    return Pose(A.R @ B.R, A.R @ B.t + A.t)


def pose_inverse(P):
    return Pose(P.R.T, -P.R.T @ P.t)


def transform_point(P, p):
    p = np.asarray(p, dtype=np.float64)
    return p @ P.R.T + P.t


def project(K, p_cam):
    p_cam = np.asarray(p_cam, dtype=np.float64)
    z = p_cam[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera('Point at or behind the camera plane')
    u = K.fx * p_cam[..., 0] / z + K.cx
    v = K.fy * p_cam[..., 1] / z + K.cy
    return u, v


def rotation_angle_deg(R_a, R_b):
    cos = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def pose_error(P_hat, P):
    trans_err = float(np.linalg.norm(P_hat.t - P.t))
    return PoseError(trans_err, rotation_angle_deg(P_hat.R, P.R))


def sample_rotation(rng, max_angle_deg):
    """Axis uniform on the sphere, angle uniform in [0, max_angle_deg]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_angle_deg))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def rotation_z(angle_deg):
    return Rotation.from_euler('z', angle_deg, degrees=True).as_matrix()
