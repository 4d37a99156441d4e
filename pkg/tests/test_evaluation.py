import math
import os

import numpy as np
import pytest

import config as config_lib
import evaluation
import formats
from dataset import PoseDataset
from evaluation import EvalReport, THRESHOLDS, make_report, threshold_name
from geometry import PoseError
from regressor import init_params


def tiny_config(**overrides):
    base = {'model_d_model': 8, 'model_n_heads': 2, 'model_ffn_dim': 8, 'model_pe3d_bands': 2,
            'train_epochs': 1, 'train_batch_size': 4, 'eval_batch_size': 2}
    base.update(overrides)
    return config_lib.get_config('tiny', base)


class TestEvalReport:

    def test_threshold_names(self):
        assert [threshold_name(*t) for t in THRESHOLDS] == ['acc_5cm_5deg', 'acc_10cm_5deg', 'acc_50cm_5deg']

    def test_hand_count(self):
        report = EvalReport(['a', 'b'], [PoseError(0.04, 1.0), PoseError(0.20, 1.0)])
        assert report.accuracy(0.10, 5.0) == 0.5
        assert report.accuracies[(0.05, 5.0)] == 0.5
        assert report.accuracies[(0.50, 5.0)] == 1.0
        assert report.median_trans == pytest.approx(0.12)

    def test_strict_thresholds(self):
        report = EvalReport(['a'], [PoseError(0.10, 1.0)])
        assert report.accuracy(0.10, 5.0) == 0.0
        report = EvalReport(['a'], [PoseError(0.01, 5.0)])
        assert report.accuracy(0.10, 5.0) == 0.0

    def test_medians(self):
        errors = [PoseError(t, r) for t, r in ((3.0, 30.0), (1.0, 10.0), (2.0, 20.0))]
        report = EvalReport(['a', 'b', 'c'], errors)
        assert (report.median_trans, report.median_rot) == (2.0, 20.0)
        report = EvalReport(['a', 'b', 'c', 'd'], errors + [PoseError(4.0, 40.0)])
        assert (report.median_trans, report.median_rot) == (2.5, 25.0)

    def test_monotone_accuracies(self, rng):
        errors = [PoseError(t, r) for t, r in zip(rng.exponential(0.2, 50), rng.exponential(5.0, 50))]
        report = EvalReport([str(i) for i in range(50)], errors)
        accs = [report.accuracies[t] for t in THRESHOLDS]
        assert accs == sorted(accs)

    def test_failures_count_as_misses(self):
        report = EvalReport(['a', 'b'], [PoseError(math.inf, 180.0), PoseError(0.0, 0.0)])
        assert report.accuracy(0.5, 5.0) == 0.5
        assert report.median_trans == math.inf

    def test_write(self, tmp_path):
        report = EvalReport(['a', 'b'], [PoseError(0.04, 1.0), PoseError(0.20, 1.5)], baseline_median_trans=2.0)
        path = str(tmp_path / 'eval.csv')
        report.write(path)
        header, rows = formats.read_csv(path)
        assert header == ['frame', 'trans_m', 'rot_deg']
        assert rows == [['a', '0.04', '1.0'], ['b', '0.2', '1.5']]
        _, summary = formats.read_csv(str(tmp_path / 'eval_summary.csv'))
        summary = dict(summary)
        assert float(summary['acc_10cm_5deg']) == 0.5
        assert float(summary['baseline_median_trans_m']) == 2.0
        assert int(summary['n_frames']) == 2


class TestEvaluate:

    def test_exact_predictions(self, tiny_dataset):
        dataset = PoseDataset.load(tiny_dataset, 'query')
        report = make_report(dataset, [s.gt for s in dataset.samples])
        assert report.median_trans == 0.0 and report.median_rot == pytest.approx(0.0, abs=1e-5)
        assert all(acc == 1.0 for acc in report.accuracies.values())
        assert report.baseline_median_trans > 0

    def test_untrained_model_predicts_identity(self, tiny_dataset, tmp_path):
        model = init_params(tiny_config(), 0)
        out = str(tmp_path / 'eval.csv')
        report = evaluation.evaluate(model, tiny_dataset, out)
        assert report.median_trans == pytest.approx(report.baseline_median_trans)
        _, rows = formats.read_csv(out)
        assert len(rows) == len(report.frames)

    def test_oracle_on_clean_data(self, tiny_dataset, tmp_path):
        dump = str(tmp_path / 'corr')
        report = evaluation.evaluate_oracle(tiny_dataset, tiny_config(), str(tmp_path / 'oracle.csv'),
                                            dump_dir=dump)
        assert report.median_trans < 1e-4
        assert report.median_rot < 1e-3
        assert len(os.listdir(dump)) == len(report.frames)

    def test_noise_grid(self, tiny_dataset, tmp_path):
        model = init_params(tiny_config(), 0)
        out = str(tmp_path / 'noise.csv')
        grid = evaluation.noise_experiment(model, tiny_dataset, out, config=model.config)
        assert grid.shape == (2, 6)
        header, rows = formats.read_csv(out)
        assert header == ['magnitude_m', 'fraction_0', 'fraction_0.2', 'fraction_0.4', 'fraction_0.6',
                          'fraction_0.8', 'fraction_1']
        assert [float(r[0]) for r in rows] == [0.1, 0.5]
        clean = evaluation.evaluate(model, tiny_dataset)
        threshold = (model.config['eval_noise_threshold'], 5.0)
        np.testing.assert_array_equal(grid[:, 0], clean.accuracy(*threshold))

    def test_ablate(self, tiny_dataset, tmp_path):
        out = str(tmp_path / 'ablate.csv')
        rows = evaluation.ablate(tiny_dataset, tiny_config(), out)
        assert [r[0] for r in rows] == list(evaluation.ABLATIONS)
        header, written = formats.read_csv(out)
        assert header[:4] == ['variant', 'seed', 'median_trans_m', 'median_rot_deg']
        assert len(written) == 4
