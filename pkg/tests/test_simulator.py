import os

import numpy as np
import pytest

import formats
from errors import UnviewableScene
from geometry import Intrinsics, Pose
from simulator import (MIN_VALID_FRACTION, NoiseSpec, Scene, SceneSpec, generate_scene, inject_noise, look_at,
                       make_dataset, render_scm, render_variant, reprojection_residual, sample_intrinsics,
                       sample_pose, sample_view)
from utils import sample_rng


def flat_scene():
    return Scene(SceneSpec(seed=0), bumps=np.zeros((0, 4)))


class TestSceneSpec:

    def test_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(extent=(1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            SceneSpec(surface='sphere')
        with pytest.raises(ValueError):
            SceneSpec(h=4)

    def test_config_round_trip(self, tiny_config):
        spec = SceneSpec.from_config(tiny_config)
        assert (spec.n_map, spec.h, spec.w) == (12, 12, 16)
        assert SceneSpec.from_config(dict(tiny_config, **spec.to_config())) == spec

    def test_noise_spec(self):
        with pytest.raises(ValueError):
            NoiseSpec(1.5, 0.1)
        with pytest.raises(ValueError):
            NoiseSpec(0.5, -0.1)


class TestScene:

    @pytest.mark.parametrize('surface', ['heightfield', 'room'])
    def test_deterministic(self, surface):
        a = generate_scene(SceneSpec(seed=5, surface=surface))
        b = generate_scene(SceneSpec(seed=5, surface=surface))
        c = generate_scene(SceneSpec(seed=6, surface=surface))
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_look_at(self):
        pose = look_at(np.array([0.0, -3.0, 1.0]), np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]))
        assert pose.is_valid()
        np.testing.assert_allclose(pose.R[:, 2], [0.0, 1.0, 0.0], atol=1e-12)
        assert pose.R[2, 1] < 0  # image y points down
        assert look_at(np.zeros(3), np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0])) is None

    def test_intrinsics(self, tiny_spec, rng):
        for _ in range(20):
            K = sample_intrinsics(tiny_spec, rng)
            assert 400 * 16 / 640 <= K.fx <= 800 * 16 / 640
            assert K.fx == K.fy
            assert (K.cx, K.cy) == (8.0, 6.0)
        fixed = SceneSpec(randomize_k=False, focal=600.0, w=64, h=48)
        assert sample_intrinsics(fixed, rng).fx == pytest.approx(60.0)


class TestRender:

    def test_flat_plane_grid(self):
        scene = flat_scene()
        z0 = scene.height(0.0, 0.0)
        K = Intrinsics(20.0, 20.0, 8.0, 6.0)
        R = np.column_stack([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
        pose = Pose(R, [0.0, 0.0, 1.0])
        scm = render_scm(scene, pose, K, 12, 16)
        assert scm.mask.all()

        u, v = np.meshgrid(np.arange(16), np.arange(12))
        depth = 1.0 - z0
        expected = np.stack([depth * (u + 0.5 - K.cx) / K.fx, -depth * (v + 0.5 - K.cy) / K.fy,
                             np.full(u.shape, z0)], axis=-1)
        np.testing.assert_allclose(scm.coords, expected, atol=1e-9)

    @pytest.mark.parametrize('surface', ['heightfield', 'room'])
    def test_closure(self, surface):
        # 50 frames per surface, 100 in total
        spec = SceneSpec(seed=2, surface=surface, h=24, w=32)
        scene = generate_scene(spec)
        for i in range(50):
            rng = sample_rng(0, 0, i)
            K = sample_intrinsics(spec, rng)
            pose, scm = sample_view(scene, K, rng)
            assert pose.is_valid()
            assert scm.mask.mean() >= MIN_VALID_FRACTION
            assert reprojection_residual(scm, K, pose) <= 1e-6
            points = scm.coords[scm.mask]
            assert np.all(points >= spec.lower - 1e-9) and np.all(points <= spec.upper + 1e-9)

    def test_sample_pose_deterministic(self):
        scene = generate_scene(SceneSpec(seed=1, h=12, w=16))
        a = sample_pose(scene, sample_rng(4))
        b = sample_pose(scene, sample_rng(4))
        np.testing.assert_array_equal(a.matrix(), b.matrix())

    def test_unviewable(self):
        class BlindScene(Scene):
            def intersect(self, origin, dirs):
                return np.full(len(dirs), np.nan), np.zeros(len(dirs), dtype=bool)

        scene = BlindScene(SceneSpec(seed=1, h=12, w=16), bumps=np.zeros((0, 4)))
        with pytest.raises(UnviewableScene):
            sample_view(scene, Intrinsics(10.0, 10.0, 8.0, 6.0), sample_rng(0))

    def test_variant_keeps_closure(self):
        spec = SceneSpec(seed=2, h=24, w=32)
        scene = generate_scene(spec)
        rng = sample_rng(0, 0, 0)
        K = sample_intrinsics(spec, rng)
        pose, _ = sample_view(scene, K, rng)
        scm, var_K, var_pose = render_variant(scene, pose, K, rng)
        assert var_pose.is_valid()
        assert reprojection_residual(scm, var_K, var_pose) <= 1e-6
        assert np.all(scm.coords[~scm.mask] == 0)


class TestNoise:

    def make_scm(self):
        spec = SceneSpec(seed=2, h=24, w=32)
        scene = generate_scene(spec)
        rng = sample_rng(0, 0, 1)
        K = sample_intrinsics(spec, rng)
        return sample_view(scene, K, rng)[1]

    def test_identity_cases(self, rng):
        scm = self.make_scm()
        for noise in (NoiseSpec(0.0, 0.5), NoiseSpec(1.0, 0.0)):
            out = inject_noise(scm, noise, rng)
            np.testing.assert_array_equal(out.coords, scm.coords)
            np.testing.assert_array_equal(out.mask, scm.mask)

    def test_count_and_bound(self, rng):
        scm = self.make_scm()
        out = inject_noise(scm, NoiseSpec(0.5, 0.1), rng)
        changed = np.any(out.coords != scm.coords, axis=-1)
        assert changed.sum() == scm.n_valid // 2
        assert not np.any(changed & ~scm.mask)
        assert np.abs(out.coords - scm.coords).max() <= 0.1 + 1e-12
        np.testing.assert_array_equal(out.mask, scm.mask)


class TestMakeDataset:

    def test_layout(self, tiny_dataset, tiny_spec):
        for split, count in (('mapping', tiny_spec.n_map), ('query', tiny_spec.n_query)):
            files = os.listdir(os.path.join(tiny_dataset, split))
            assert len(files) == 3 * count
            assert len(formats.list_frames(tiny_dataset, split)) == count

        header, samples = formats.read_manifest(os.path.join(tiny_dataset, 'manifest.txt'))
        assert int(header['n_samples']) == len(samples) == tiny_spec.n_map + tiny_spec.n_query
        assert header['scene_digest'] == generate_scene(tiny_spec).digest()
        assert header['sim_seed'] == str(tiny_spec.seed)
        assert samples[0] == ('mapping/frame_000000', (tiny_spec.seed, 0, 0))
        assert samples[-1] == ('query/frame_000002', (tiny_spec.seed, 1, 2))

    def test_reproducible(self, tiny_dataset, tiny_spec, tmp_path):
        make_dataset(tiny_spec, str(tmp_path / 'again'))
        with open(os.path.join(tiny_dataset, 'manifest.txt'), 'rb') as f:
            first = f.read()
        with open(tmp_path / 'again' / 'manifest.txt', 'rb') as f:
            assert f.read() == first
        name = formats.list_frames(tiny_dataset, 'query')[0]
        for a, b in zip(formats.frame_paths(tiny_dataset, 'query', name),
                        formats.frame_paths(str(tmp_path / 'again'), 'query', name)):
            with open(a, 'rb') as fa, open(b, 'rb') as fb:
                assert fa.read() == fb.read()

    def test_reload_closure(self, tiny_dataset):
        for split in formats.SPLITS:
            for name in formats.list_frames(tiny_dataset, split):
                scm, K, pose = formats.read_frame(tiny_dataset, split, name)
                assert reprojection_residual(scm, K, pose) <= 1e-3

    def test_variants(self, tmp_path):
        spec = SceneSpec(seed=3, n_map=2, n_query=1, h=12, w=16, variants=2)
        names = make_dataset(spec, str(tmp_path))
        mapping = [n for n in names if n.startswith('mapping/')]
        assert 2 <= len(mapping) <= 6
        assert 'mapping/frame_000000' in mapping
        for name in formats.list_frames(str(tmp_path), 'mapping'):
            scm, K, pose = formats.read_frame(str(tmp_path), 'mapping', name)
            assert reprojection_residual(scm, K, pose) <= 1e-3
