import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import wandb
from tqdm import tqdm

import config as config_lib
import formats
import oracle
import trainer
import utils
from dataset import PoseDataset, TrainSample
from errors import NumericalError
from geometry import Pose, PoseError, pose_error
from simulator import NoiseSpec, inject_noise

THRESHOLDS = ((0.05, 5.0), (0.10, 5.0), (0.50, 5.0))  # meters, degrees
FRAME_HEADER = ('frame', 'trans_m', 'rot_deg')
NOISE_STREAM = 3

ABLATIONS = {
    'full': {},
    'no_reattention': {'model_enable_reattention': False},
    'no_reattention_no_dynamic_pe': {'model_enable_reattention': False, 'model_enable_dynamic_pe': False},
    'no_dynamic_pe': {'model_enable_dynamic_pe': False},
}
SIZE_ABLATIONS = {
    'blocks_4': {'model_n_blocks': 4, 'model_group_size': 4},
    'blocks_8': {'model_n_blocks': 8, 'model_group_size': 4},
    'blocks_12': {'model_n_blocks': 12, 'model_group_size': 4},
}
EXTRA_ABLATIONS = {
    'no_aux_losses': {'model_aux_losses': False},
    'rotation_9d': {'model_rotation_repr': '9d'},
}


def threshold_name(trans_m, rot_deg):
    return f'acc_{round(trans_m * 100):d}cm_{rot_deg:g}deg'


@dataclass
class EvalReport:
    frames: list
    errors: list
    median_trans: float = field(init=False)
    median_rot: float = field(init=False)
    accuracies: dict = field(init=False)
    baseline_median_trans: float = None

    def __post_init__(self):
        self.median_trans = utils.median([e.trans_err for e in self.errors])
        self.median_rot = utils.median([e.rot_err for e in self.errors])
        self.accuracies = {thr: self.accuracy(*thr) for thr in THRESHOLDS}

    def accuracy(self, trans_m, rot_deg):
        """Fraction of frames strictly below both thresholds."""
        hits = sum(1 for e in self.errors if e.trans_err < trans_m and e.rot_err < rot_deg)
        return hits / len(self.errors)

    def summary(self):
        result = {'n_frames': len(self.errors), 'median_trans_m': self.median_trans,
                  'median_rot_deg': self.median_rot}
        result.update({threshold_name(*thr): acc for thr, acc in self.accuracies.items()})
        if self.baseline_median_trans is not None:
            result['baseline_median_trans_m'] = self.baseline_median_trans
        return result

    def write(self, path):
        """Per-frame CSV at path, summary CSV next to it."""
        formats.write_csv(path, FRAME_HEADER,
                          [(name, e.trans_err, e.rot_err) for name, e in zip(self.frames, self.errors)])
        formats.write_csv(summary_path(path), ('metric', 'value'), [(k, v) for k, v in self.summary().items()])


def summary_path(path):
    root, ext = os.path.splitext(path)
    return f'{root}_summary{ext or ".csv"}'


def load_query(data_dir):
    return PoseDataset.load(data_dir, 'query')


def noisy_samples(dataset, noise, seed):
    samples = []
    for i, s in enumerate(dataset.samples):
        rng = utils.sample_rng(seed, NOISE_STREAM, i)
        samples.append(TrainSample(inject_noise(s.scm, noise, rng), s.K, s.gt))
    return samples


def predict(model, dataset, batch_size, samples=None):
    poses = []
    for start in tqdm(range(0, len(dataset), batch_size), desc='Evaluating', leave=False, file=sys.stderr):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        batch_samples = None if samples is None else [samples[i] for i in idx]
        coords, mask, intrinsics, _, _ = dataset.get_data(idx, dtype=model.dtype, samples=batch_samples)
        poses += model.predict_poses(coords, mask, intrinsics)
    return poses


def evaluate(model, data_dir, out_csv=None, config=None, noise=None, seed=0, dataset=None):
    """Relocalizes every query frame with the regressor and compares against the stored poses."""
    config = model.config if config is None else config
    dataset = load_query(data_dir) if dataset is None else dataset
    samples = None if noise is None else noisy_samples(dataset, noise, seed)
    poses = predict(model, dataset, config['eval_batch_size'], samples)
    return make_report(dataset, poses, out_csv)


def make_report(dataset, poses, out_csv=None):
    errors = [pose_error(p, s.gt) if p is not None else PoseError(math.inf, 180.0)
              for p, s in zip(poses, dataset.samples)]
    baseline = utils.median([pose_error(Pose.identity(), s.gt).trans_err for s in dataset.samples])
    report = EvalReport(list(dataset.names), errors, baseline_median_trans=baseline)
    if out_csv is not None:
        report.write(out_csv)
    return report


def evaluate_oracle(data_dir, config, out_csv=None, dump_dir=None):
    """Same report as evaluate, with poses from RANSAC PnP on the scene coordinates.

    Frames on which the solver fails count with infinite translation error.
    """
    dataset = load_query(data_dir)
    cfg = oracle.RansacConfig.from_config(config)
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)

    def solve(i):
        s = dataset.samples[i]
        uv, points = oracle.correspondences_from_scm(s.scm, config['ransac_max_corrs'])
        if dump_dir is not None:
            formats.write_correspondences(os.path.join(dump_dir, f'{dataset.names[i]}.corr.txt'), uv, points)
        try:
            pose, _ = oracle.ransac_pnp(uv, points, s.K, cfg)
        except NumericalError as e:
            print(f'Oracle failed on {dataset.names[i]}: {e}', file=sys.stderr)
            return None
        return pose

    with ThreadPoolExecutor(max_workers=utils.num_workers()) as pool:
        poses = list(tqdm(pool.map(solve, range(len(dataset))), total=len(dataset), desc='Oracle',
                          file=sys.stderr))
    return make_report(dataset, poses, out_csv)


def noise_experiment(model, data_dir, out_csv=None, config=None, magnitudes=None, fractions=None):
    """Accuracy grid, one row per noise magnitude and one column per corrupted fraction."""
    config = model.config if config is None else config
    magnitudes = config['eval_noise_magnitudes'] if magnitudes is None else magnitudes
    fractions = config['eval_noise_fractions'] if fractions is None else fractions
    threshold = (config['eval_noise_threshold'], 5.0)
    dataset = load_query(data_dir)

    grid = []
    for magnitude in magnitudes:
        row = []
        for fraction in fractions:
            noise = None if fraction == 0 else NoiseSpec(fraction, magnitude)
            report = evaluate(model, data_dir, config=config, noise=noise, seed=config['eval_seed'],
                              dataset=dataset)
            row.append(report.accuracy(*threshold))
        grid.append(row)
        print(f'noise {magnitude} m: ' + ' '.join(f'{acc:.3f}' for acc in row), file=sys.stderr)

    if out_csv is not None:
        header = ['magnitude_m'] + [f'fraction_{f:g}' for f in fractions]
        formats.write_csv(out_csv, header, [[float(m)] + [float(a) for a in row] for m, row in zip(magnitudes, grid)])
    return np.array(grid)


def ablate(data_dir, config, out_csv=None, seeds=(0,), sizes=False, extras=False):
    """Trains and evaluates the architectural variants; one CSV row per (variant, seed)."""
    variants = dict(ABLATIONS)
    if sizes:
        variants.update(SIZE_ABLATIONS)
    if extras:
        variants.update(EXTRA_ABLATIONS)

    header = ('variant', 'seed', 'median_trans_m', 'median_rot_deg') + tuple(threshold_name(*t) for t in THRESHOLDS)
    rows = []
    for name, overrides in variants.items():
        variant_config = config_lib.get_config('default', dict(config, **overrides))
        for seed in seeds:
            print(f'Ablation {name}, seed {seed}', file=sys.stderr)
            model, _ = trainer.train(data_dir, variant_config, seed=seed)
            report = evaluate(model, data_dir, config=variant_config)
            rows.append((name, seed, report.median_trans, report.median_rot,
                         *(report.accuracies[t] for t in THRESHOLDS)))
            if wandb.run is not None:
                wandb.log({f'ablate/{name}/{key}': value for key, value in report.summary().items()})
    if out_csv is not None:
        formats.write_csv(out_csv, header, rows)
    return rows
