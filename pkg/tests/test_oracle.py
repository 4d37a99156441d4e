import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from encoding import SceneCoordinateMap
from errors import DegenerateConfiguration, NoConsensus, TooFewPoints
from geometry import Intrinsics, Pose, pose_error, pose_inverse, transform_point
from oracle import (Correspondence, RansacConfig, as_arrays, correspondences_from_scm, dlt_pnp, localize_scm,
                    ransac_pnp, refine_pnp, reprojection_errors)
from simulator import look_at

K = Intrinsics(400.0, 400.0, 32.0, 32.0)


def project_points(pose, points, K=K):
    p_cam = transform_point(pose_inverse(pose), points)
    return np.column_stack([K.fx * p_cam[:, 0] / p_cam[:, 2] + K.cx, K.fy * p_cam[:, 1] / p_cam[:, 2] + K.cy])


def cube_corners():
    return np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)])


def cube_pose():
    return look_at(np.array([0.0, 0.0, 5.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]))


def random_scene(rng, n=200):
    pose = Pose(Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix(), rng.normal(size=3))
    depth = rng.uniform(2.0, 6.0, size=n)
    uv = rng.uniform(0.0, 64.0, size=(n, 2))
    rays = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(n)])
    points = transform_point(pose, rays * depth[:, None])
    return pose, uv, points


def assert_pose_close(a, b, trans=1e-6, rot=1e-5):
    err = pose_error(a, b)
    assert err.trans_err <= trans and err.rot_err <= rot, err


def assert_pose_equal(a, b, tol):
    # elementwise; the arccos angle loses precision below ~1e-6 degrees
    assert np.abs(a.R - b.R).max() <= tol
    assert np.abs(a.t - b.t).max() <= tol


class TestCorrespondences:

    def test_finite(self):
        with pytest.raises(ValueError):
            Correspondence(1.0, math.nan, (0.0, 0.0, 0.0))

    def test_as_arrays(self):
        uv, points = as_arrays([Correspondence(1.0, 2.0, (3.0, 4.0, 5.0))])
        np.testing.assert_array_equal(uv, [[1.0, 2.0]])
        np.testing.assert_array_equal(points, [[3.0, 4.0, 5.0]])

    def test_from_scm(self):
        coords = np.arange(24, dtype=np.float64).reshape(2, 4, 3)
        mask = np.array([[True, False, False, True], [False, True, False, False]])
        uv, points = correspondences_from_scm(SceneCoordinateMap(coords, mask))
        np.testing.assert_array_equal(uv, [[0.5, 0.5], [3.5, 0.5], [1.5, 1.5]])
        np.testing.assert_array_equal(points, coords[mask])
        uv, _ = correspondences_from_scm(SceneCoordinateMap(coords, mask), max_corrs=2)
        assert len(uv) == 2

    def test_config(self):
        with pytest.raises(ValueError):
            RansacConfig(threshold=0.0)
        with pytest.raises(ValueError):
            RansacConfig(confidence=1.0)


class TestDLT:

    def test_cube_corners(self):
        pose = cube_pose()
        points = cube_corners()
        assert_pose_close(dlt_pnp(project_points(pose, points), points, K), pose)

    def test_identity(self, rng):
        points = np.column_stack([rng.uniform(-1, 1, size=(10, 2)), rng.uniform(2, 5, size=10)])
        assert_pose_close(dlt_pnp(project_points(Pose.identity(), points), points, K), Pose.identity())

    def test_random(self, rng):
        pose, uv, points = random_scene(rng, n=50)
        assert_pose_close(dlt_pnp(uv, points, K), pose)

    def test_too_few(self):
        points = cube_corners()[:5]
        with pytest.raises(TooFewPoints):
            dlt_pnp(project_points(cube_pose(), points), points, K)

    def test_collinear(self):
        points = np.column_stack([np.linspace(-1, 1, 8), np.zeros(8), np.zeros(8)])
        with pytest.raises(DegenerateConfiguration):
            dlt_pnp(project_points(cube_pose(), points), points, K)


class TestRefine:

    def test_fixed_point(self, rng):
        pose, uv, points = random_scene(rng)
        refined = refine_pnp(pose, uv, points, K)
        assert_pose_equal(refined, pose, 1e-9)

    def test_converges(self, rng):
        pose, uv, points = random_scene(rng)
        axis = rng.normal(size=3)
        delta = Rotation.from_rotvec(math.radians(1.0) * axis / np.linalg.norm(axis)).as_matrix()
        init = Pose(delta @ pose.R, pose.t + np.array([0.05, 0.0, 0.0]))
        refined, costs = refine_pnp(init, uv, points, K, return_costs=True)
        assert_pose_equal(refined, pose, 1e-8)
        assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_errors_match_projection(self, rng):
        pose, uv, points = random_scene(rng, n=20)
        assert reprojection_errors(pose, uv, points, K).max() <= 1e-9
        behind = transform_point(pose, np.array([[0.0, 0.0, -1.0]]))
        assert np.isinf(reprojection_errors(pose, uv[:1], behind, K)[0])


class TestRansac:

    def test_clean(self, rng):
        pose, uv, points = random_scene(rng)
        estimate, inliers = ransac_pnp(uv, points, K, RansacConfig(seed=1))
        assert inliers.all()
        reference = refine_pnp(dlt_pnp(uv, points, K), uv, points, K)
        assert_pose_equal(estimate, reference, 1e-8)

    def test_outliers(self, rng):
        pose, uv, points = random_scene(rng)
        corrupted = rng.choice(len(points), size=int(0.4 * len(points)), replace=False)
        noisy = points.copy()
        # 1 m offsets perpendicular to the viewing ray
        rays = points[corrupted] - pose.t
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        offset = np.cross(rays, rng.normal(size=(len(corrupted), 3)))
        noisy[corrupted] += offset / np.linalg.norm(offset, axis=1, keepdims=True)
        estimate, inliers = ransac_pnp(uv, noisy, K, RansacConfig(seed=0))
        assert_pose_close(estimate, pose, trans=1e-3, rot=1e-2)
        assert not inliers[corrupted].any()

    def test_deterministic(self, rng):
        _, uv, points = random_scene(rng)
        points[:50] += 0.5
        a, _ = ransac_pnp(uv, points, K, RansacConfig(seed=3))
        b, _ = ransac_pnp(uv, points, K, RansacConfig(seed=3))
        np.testing.assert_array_equal(a.matrix(), b.matrix())

    def test_all_corrupted(self, rng):
        _, uv, _ = random_scene(rng, n=60)
        garbage = rng.uniform(-50, 50, size=(60, 3))
        with pytest.raises(NoConsensus):
            ransac_pnp(uv, garbage, K, RansacConfig(threshold=0.01, max_iters=200))

    def test_localize_scm(self, rng):
        pose = cube_pose()
        u, v = np.meshgrid(np.arange(16), np.arange(12))
        K_small = Intrinsics(20.0, 20.0, 8.0, 6.0)
        rays = np.stack([(u + 0.5 - 8.0) / 20.0, (v + 0.5 - 6.0) / 20.0, np.ones(u.shape)], axis=-1)
        depth = rng.uniform(3.0, 6.0, size=u.shape)
        coords = transform_point(pose, rays * depth[..., None])
        estimate, inliers = localize_scm(SceneCoordinateMap(coords, np.ones(u.shape, dtype=bool)), K_small)
        assert inliers.all()
        assert_pose_close(estimate, pose)
