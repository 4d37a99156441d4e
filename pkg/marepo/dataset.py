import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

import formats
import utils
from encoding import SceneCoordinateMap
from errors import DatasetError
from geometry import Intrinsics, Pose, pose_compose, sample_rotation


@dataclass(eq=False)
class TrainSample:
    scm: SceneCoordinateMap
    K: Intrinsics
    gt: Pose

    def __post_init__(self):
        if self.scm.n_valid < 1:
            raise DatasetError('Training sample has no valid scene coordinates')
        self.gt.check()


@dataclass(frozen=True)
class AugmentConfig:
    jitter_trans: float = 1.0  # meters
    jitter_rot: float = 180.0  # degrees

    def __post_init__(self):
        if self.jitter_trans < 0 or self.jitter_rot < 0:
            raise ValueError(f'Jitter must be >= 0, got {self.jitter_trans}, {self.jitter_rot}')

    @staticmethod
    def from_config(config):
        return AugmentConfig(config['aug_jitter_trans'], config['aug_jitter_rot'])


def draw_jitter(cfg, rng):
    R_a = sample_rotation(rng, cfg.jitter_rot) if cfg.jitter_rot > 0 else np.eye(3)
    t_a = rng.uniform(-cfg.jitter_trans, cfg.jitter_trans, size=3) if cfg.jitter_trans > 0 else np.zeros(3)
    return Pose(R_a, t_a)


def apply_rigid(sample, T):
    """Moves the whole scene by T: coordinates p -> R p + t on valid cells, gt -> T * gt."""
    coords = sample.scm.coords.copy()
    mask = sample.scm.mask
    coords[mask] = coords[mask] @ T.R.T + T.t
    return TrainSample(SceneCoordinateMap(coords, mask.copy()), sample.K, pose_compose(T, sample.gt))


def augment(sample, cfg, rng):
    if cfg.jitter_trans == 0 and cfg.jitter_rot == 0:
        return sample
    return apply_rigid(sample, draw_jitter(cfg, rng))


def is_validation_frame(name):
    return int(hashlib.sha1(name.encode('utf-8')).hexdigest(), 16) % 10 == 0


def read_split(data_dir, split):
    names = formats.list_frames(data_dir, split)

    def load(name):
        scm, K, gt = formats.read_frame(data_dir, split, name)
        return TrainSample(scm, K, gt)

    with ThreadPoolExecutor(max_workers=utils.num_workers()) as pool:
        samples = list(pool.map(load, names))  # ordered by name
    return names, samples


class PoseDataset:
    """In-memory stack of equally sized frames."""

    def __init__(self, names, samples):
        if len(samples) == 0:
            raise DatasetError('Dataset is empty')
        shape = samples[0].scm.coords.shape
        for name, s in zip(names, samples):
            if s.scm.coords.shape != shape:
                raise DatasetError(f'Frame {name} has shape {s.scm.coords.shape[:2]}, expected {shape[:2]}')
        self.names = list(names)
        self.samples = list(samples)
        self.coords = np.stack([s.scm.coords for s in samples])
        self.mask = np.stack([s.scm.mask for s in samples])
        self.intrinsics = np.stack([s.K.as_array() for s in samples])
        self.R = np.stack([s.gt.R for s in samples])
        self.t = np.stack([s.gt.t for s in samples])

    @staticmethod
    def load(data_dir, split='mapping'):
        names, samples = read_split(data_dir, split)
        return PoseDataset(names, samples)

    def __len__(self):
        return len(self.samples)

    def subset(self, indices):
        return PoseDataset([self.names[i] for i in indices], [self.samples[i] for i in indices])

    def split_validation(self):
        """(train, validation) by a hash of the frame name; validation may be None."""
        val = [i for i, name in enumerate(self.names) if is_validation_frame(name)]
        train = [i for i, name in enumerate(self.names) if not is_validation_frame(name)]
        if not train:
            return self, None
        return self.subset(train), (self.subset(val) if val else None)

    def get_data(self, idx, dtype=torch.float32, samples=None):
        """Batch tensors (coords, mask, intrinsics, R, t) for the given indices."""
        idx = np.asarray(idx, dtype=np.int64)
        if samples is None:
            coords, mask, R, t = self.coords[idx], self.mask[idx], self.R[idx], self.t[idx]
        else:
            coords = np.stack([s.scm.coords for s in samples])
            mask = np.stack([s.scm.mask for s in samples])
            R = np.stack([s.gt.R for s in samples])
            t = np.stack([s.gt.t for s in samples])
        return (torch.as_tensor(coords, dtype=dtype), torch.as_tensor(mask),
                torch.as_tensor(self.intrinsics[idx], dtype=dtype),
                torch.as_tensor(R, dtype=dtype), torch.as_tensor(t, dtype=dtype))

    def augmented_data(self, idx, cfg, rng, dtype=torch.float32):
        samples = [augment(self.samples[i], cfg, rng) for i in idx]
        return self.get_data(idx, dtype, samples=samples)

    def sample_batches(self, batch_size, rng):
        order = rng.permutation(len(self))
        return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
