"""Procedural desk-scale scenes, camera sampling and ray-cast scene coordinate maps.

Scene frame: the extent box is centered at the origin with +z up. Camera frame follows the
pinhole convention of the rest of the package (x right, y down, z forward).
"""
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

import config as config_lib
import formats
import utils
from encoding import SceneCoordinateMap
from errors import UnviewableScene
from geometry import CELL_OFFSET, MIN_DEPTH, Intrinsics, Pose, cell_ray, pose_inverse, rotation_z, \
    sample_rotation, transform_point

MIN_VALID_FRACTION = 0.3
MAX_POSE_ATTEMPTS = 100
MARCH_STEPS = 256
BISECT_STEPS = 60
NOMINAL_WIDTH = 640.0  # full image width the focal range refers to

SPLIT_IDS = {'mapping': 0, 'query': 1}
SCENE_STREAM = 2


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: tuple = (4.0, 4.0, 4.0)
    surface: str = 'heightfield'
    n_map: int = 300
    n_query: int = 100
    h: int = 60
    w: int = 80
    randomize_k: bool = True
    focal: float = 600.0
    variants: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'extent', tuple(float(x) for x in self.extent))
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise ValueError(f'extent must be 3 positive sizes, got {self.extent}')
        if self.surface not in ('heightfield', 'room'):
            raise ValueError(f'Unsupported surface: {self.surface}')
        if self.h < 8 or self.w < 8:
            raise ValueError(f'Map resolution must be at least 8x8, got {self.h}x{self.w}')
        if self.n_map < 1 or self.n_query < 1:
            raise ValueError('Frame counts must be >= 1')
        if self.variants < 0:
            raise ValueError('variants must be >= 0')

    @staticmethod
    def from_config(config):
        return SceneSpec(
            seed=config['sim_seed'], extent=config['sim_extent'], surface=config['sim_surface'],
            n_map=config['sim_n_map'], n_query=config['sim_n_query'], h=config['sim_h'], w=config['sim_w'],
            randomize_k=config['sim_randomize_k'], focal=config['sim_focal'], variants=config['sim_variants'])

    def to_config(self):
        return {f'sim_{key}': value for key, value in self.__dict__.items()}

    @property
    def lower(self):
        return -0.5 * np.array(self.extent)

    @property
    def upper(self):
        return 0.5 * np.array(self.extent)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.extent))


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float
    magnitude: float  # meters

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f'Noise fraction must lie in [0, 1], got {self.fraction}')
        if self.magnitude < 0:
            raise ValueError(f'Noise magnitude must be >= 0, got {self.magnitude}')


def _slab(origin, dirs, lo, hi):
    """Entry and exit ray parameters of an axis aligned box."""
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=-1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=-1)
    return t_near, t_far


class Scene:
    """Analytic surface with a closed-form or bisection ray intersection."""

    def __init__(self, spec, bumps=None, boxes=None, patches=None):
        self.spec = spec
        self.lower = spec.lower
        self.upper = spec.upper
        self.bumps = bumps  # (n, 4): center x, center y, amplitude, width
        self.boxes = boxes  # (n, 2, 3): lower and upper corners
        self.patches = patches  # (n, 2, 3): thin textureless regions on the room faces

    @property
    def kind(self):
        return self.spec.surface

    # heightfield

    def height(self, x, y):
        ez = self.spec.extent[2]
        z = np.full(np.broadcast(x, y).shape, self.lower[2] + 0.1 * ez)
        for cx, cy, amp, width in self.bumps:
            z += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width ** 2))
        return np.clip(z, self.lower[2] + 0.01 * ez, self.lower[2] + 0.6 * ez)

    def _intersect_heightfield(self, origin, dirs):
        n = dirs.shape[0]
        s_in, s_out = _slab(origin, dirs, self.lower, self.upper)
        s_in = np.maximum(s_in, 1e-3)
        hit = s_out > s_in
        s = np.full(n, np.nan)
        if not np.any(hit):
            return s, hit
        rays = np.flatnonzero(hit)
        d = dirs[rays]
        steps = np.linspace(0.0, 1.0, MARCH_STEPS)
        S = s_in[rays, None] + (s_out[rays] - s_in[rays])[:, None] * steps[None]
        px = origin[0] + S * d[:, 0:1]
        py = origin[1] + S * d[:, 1:2]
        pz = origin[2] + S * d[:, 2:3]
        below = pz - self.height(px, py) <= 0

        # a ray entering below the surface comes in through the side skirt: no hit
        crossed = np.any(below, axis=1) & ~below[:, 0]
        first = np.argmax(below, axis=1)
        rays, d, S, first = rays[crossed], d[crossed], S[crossed], first[crossed]
        lo = S[np.arange(len(rays)), first - 1]
        hi = S[np.arange(len(rays)), first]
        for _ in range(BISECT_STEPS):
            mid = 0.5 * (lo + hi)
            p = origin + mid[:, None] * d
            above = p[:, 2] - self.height(p[:, 0], p[:, 1]) > 0
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        s[rays] = 0.5 * (lo + hi)
        hit = np.zeros(n, dtype=bool)
        hit[rays] = True
        return s, hit

    # room

    def _intersect_room(self, origin, dirs):
        _, s = _slab(origin, dirs, self.lower, self.upper)
        for lo, hi in self.boxes:
            t_near, t_far = _slab(origin, dirs, lo, hi)
            front = (t_near > MIN_DEPTH) & (t_far >= t_near)
            s = np.where(front & (t_near < s), t_near, s)
        hit = np.isfinite(s) & (s > MIN_DEPTH)
        return s, hit

    def _textureless(self, points):
        flags = np.zeros(points.shape[0], dtype=bool)
        for lo, hi in self.patches:
            flags |= np.all((points >= lo) & (points <= hi), axis=-1)
        return flags

    def intersect(self, origin, dirs):
        """Ray parameters s and hit flags for rays origin + s * dirs, dirs of shape (n, 3)."""
        origin = np.asarray(origin, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        if self.kind == 'heightfield':
            return self._intersect_heightfield(origin, dirs)
        return self._intersect_room(origin, dirs)

    def contains_camera(self, c):
        if self.kind == 'heightfield':
            return c[2] > self.height(c[0], c[1]) + 0.05
        if np.any(c <= self.lower) or np.any(c >= self.upper):
            return False
        return not any(np.all((c > lo - 0.05) & (c < hi + 0.05)) for lo, hi in self.boxes)

    def sample_surface_point(self, rng):
        extent = np.array(self.spec.extent)
        if self.kind == 'heightfield':
            x, y = rng.uniform(self.lower[:2] + 0.1 * extent[:2], self.upper[:2] - 0.1 * extent[:2])
            return np.array([x, y, float(self.height(x, y))])
        center = 0.5 * (self.lower + self.upper)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        s, _ = self.intersect(center, d[None])
        return center + s[0] * d

    def digest(self):
        """Hash of the sampled surface."""
        if self.kind == 'heightfield':
            x, y = np.meshgrid(np.linspace(self.lower[0], self.upper[0], 65),
                               np.linspace(self.lower[1], self.upper[1], 65))
            data = self.height(x, y)
        else:
            data = np.concatenate([self.boxes.ravel(), self.patches.ravel()])
        return hashlib.sha1(np.ascontiguousarray(data, dtype='<f8').tobytes()).hexdigest()


def generate_scene(spec):
    rng = utils.sample_rng(spec.seed, SCENE_STREAM)
    ex, ey, ez = spec.extent
    lower, upper = spec.lower, spec.upper
    if spec.surface == 'heightfield':
        n = 12
        centers = rng.uniform(lower[:2], upper[:2], size=(n, 2))
        amps = rng.uniform(0.05, 0.35, size=n) * ez
        widths = rng.uniform(0.08, 0.25, size=n) * min(ex, ey)
        return Scene(spec, bumps=np.column_stack([centers, amps, widths]))

    boxes = []
    for _ in range(3):
        size = rng.uniform([0.15 * ex, 0.15 * ey, 0.1 * ez], [0.3 * ex, 0.3 * ey, 0.35 * ez])
        lo_xy = rng.uniform(lower[:2], upper[:2] - size[:2])
        lo = np.array([lo_xy[0], lo_xy[1], lower[2]])
        boxes.append([lo, lo + size])
    patches = []
    for _ in range(4):
        axis = rng.integers(3)
        side = rng.integers(2)
        plane = (lower if side == 0 else upper)[axis]
        size = rng.uniform(0.1, 0.25, size=3) * np.array(spec.extent)
        lo = rng.uniform(lower, upper - size)
        hi = lo + size
        lo[axis], hi[axis] = plane - 1e-6, plane + 1e-6
        patches.append([lo, hi])
    return Scene(spec, boxes=np.array(boxes), patches=np.array(patches))


def sample_intrinsics(spec, rng):
    scale = spec.w / NOMINAL_WIDTH
    f = (rng.uniform(400.0, 800.0) if spec.randomize_k else spec.focal) * scale
    return Intrinsics(f, f, spec.w / 2, spec.h / 2)


def look_at(center, target, up):
    """Camera-to-scene pose at `center` looking at `target`; image y points against `up`."""
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    norm = np.linalg.norm(x)
    if norm < 1e-6:
        return None
    x /= norm
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), center)


def render_scm(scene, pose, K, h, w):
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs = cell_ray(K, u, v).reshape(-1, 3) @ pose.R.T  # z-depth parameterisation
    s, hit = scene.intersect(pose.t, dirs)
    coords = np.zeros((h * w, 3))
    coords[hit] = pose.t + s[hit, None] * dirs[hit]
    mask = hit.copy()
    if scene.kind == 'room':
        mask[hit] &= ~scene._textureless(coords[hit])
    coords[~mask] = 0.0
    return SceneCoordinateMap(coords.reshape(h, w, 3), mask.reshape(h, w))


def _propose_center(scene, target, rng):
    extent = np.array(scene.spec.extent)
    if scene.kind == 'heightfield':
        r = rng.uniform(0.3, 0.6) * max(extent[:2])
        elevation = math.radians(rng.uniform(30.0, 75.0))
        azimuth = rng.uniform(0.0, 2 * math.pi)
        offset = np.array([math.cos(elevation) * math.cos(azimuth),
                           math.cos(elevation) * math.sin(azimuth), math.sin(elevation)])
        return target + r * offset
    lower = scene.lower + 0.15 * extent
    upper = scene.upper - 0.15 * extent
    lower[2] = scene.lower[2] + 0.25 * extent[2]
    upper[2] = scene.lower[2] + 0.75 * extent[2]
    return rng.uniform(lower, upper)


def sample_view(scene, K, rng):
    """(pose, scm) for an accepted camera: at least 30% of the grid sees the surface."""
    spec = scene.spec
    for _ in range(MAX_POSE_ATTEMPTS):
        target = scene.sample_surface_point(rng)
        center = _propose_center(scene, target, rng)
        up = sample_rotation(rng, 20.0) @ np.array([0.0, 0.0, 1.0])
        if not scene.contains_camera(center) or np.linalg.norm(target - center) < 0.5:
            continue
        pose = look_at(center, target, up)
        if pose is None:
            continue
        scm = render_scm(scene, pose, K, spec.h, spec.w)
        if scm.mask.mean() >= MIN_VALID_FRACTION:
            return pose, scm
    raise UnviewableScene(f'No camera with {MIN_VALID_FRACTION:.0%} surface coverage '
                          f'after {MAX_POSE_ATTEMPTS} attempts')


def sample_pose(scene, rng, K=None):
    K = sample_intrinsics(scene.spec, rng) if K is None else K
    return sample_view(scene, K, rng)[0]


def reprojection_residual(scm, K, pose):
    """Max distance (grid units) between reprojected valid points and their cell centers."""
    if scm.n_valid == 0:
        return 0.0
    v, u = np.nonzero(scm.mask)
    p_cam = transform_point(pose_inverse(pose), scm.coords[scm.mask])
    z = p_cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        return math.inf
    u_hat = K.fx * p_cam[:, 0] / z + K.cx
    v_hat = K.fy * p_cam[:, 1] / z + K.cy
    return float(max(np.abs(u_hat - (u + CELL_OFFSET)).max(), np.abs(v_hat - (v + CELL_OFFSET)).max()))


def inject_noise(scm, noise, rng):
    """Offsets exactly floor(fraction * n_valid) valid cells by uniform per-component noise."""
    out = scm.copy()
    flat = np.flatnonzero(scm.mask)
    count = int(math.floor(noise.fraction * len(flat)))
    if count == 0 or noise.magnitude == 0:
        return out
    chosen = rng.choice(flat, size=count, replace=False)
    coords = out.coords.reshape(-1, 3)
    coords[chosen] += rng.uniform(-noise.magnitude, noise.magnitude, size=(count, 3))
    return out


def render_variant(scene, pose, K, rng):
    """Map-level analogue of an in-plane rotated, rescaled and cropped image of the same view.

    The variant is an exact re-render, so it keeps the closure property; cells outside the
    original frame's footprint are masked.
    """
    spec = scene.spec
    angle = rng.uniform(-15.0, 15.0)
    scale = rng.uniform(0.67, 1.5)
    shift = rng.uniform(-0.1, 0.1, size=2) * np.array([spec.w, spec.h])
    var_pose = Pose(pose.R @ rotation_z(angle), pose.t)
    var_K = Intrinsics(K.fx * scale, K.fy * scale, K.cx + shift[0], K.cy + shift[1])
    scm = render_scm(scene, var_pose, var_K, spec.h, spec.w)

    p_cam = transform_point(pose_inverse(pose), scm.coords)
    z = p_cam[..., 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = K.fx * p_cam[..., 0] / z + K.cx
        v = K.fy * p_cam[..., 1] / z + K.cy
    inside = (z > MIN_DEPTH) & (u >= 0) & (u < spec.w) & (v >= 0) & (v < spec.h)
    mask = scm.mask & inside
    coords = np.where(mask[..., None], scm.coords, 0.0)
    return SceneCoordinateMap(coords, mask), var_K, var_pose


def frame_name(index, variant=0):
    return f'frame_{index:06d}' if variant == 0 else f'frame_{index:06d}_v{variant}'


def make_dataset(spec, out_dir):
    """Writes mapping/ and query/ splits plus manifest.txt; returns the relative sample names."""
    scene = generate_scene(spec)
    jobs = [('mapping', i) for i in range(spec.n_map)] + [('query', i) for i in range(spec.n_query)]

    def render_frame(job):
        split, index = job
        seed = (spec.seed, SPLIT_IDS[split], index)
        rng = utils.sample_rng(*seed)
        K = sample_intrinsics(spec, rng)
        pose, scm = sample_view(scene, K, rng)
        formats.write_frame(out_dir, split, frame_name(index), scm, K, pose)
        written = [(f'{split}/{frame_name(index)}', seed)]
        if split == 'mapping':
            for variant in range(1, spec.variants + 1):
                var_scm, var_K, var_pose = render_variant(scene, pose, K, rng)
                if var_scm.n_valid == 0:
                    continue
                formats.write_frame(out_dir, split, frame_name(index, variant), var_scm, var_K, var_pose)
                written.append((f'{split}/{frame_name(index, variant)}', seed))
        return written

    for split in formats.SPLITS:
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
    with ThreadPoolExecutor(max_workers=utils.num_workers()) as pool:
        samples = [s for written in pool.map(render_frame, jobs) for s in written]

    header = {'version': 1, 'scene_digest': scene.digest(), 'n_samples': len(samples)}
    header.update(config_lib.parse_key_values(config_lib.format_config(spec.to_config()).splitlines()))
    formats.write_manifest(os.path.join(out_dir, 'manifest.txt'), header, samples)
    return [name for name, _ in samples]
