import os
import unittest
from dataclasses import replace

import numpy as np

from mvsadapt.config import ExperimentConfig
from mvsadapt.evaluation import (ABLATION_COLUMNS, evaluate, inlier_ratio, k_sweep,
                                 pooled_metrics, predict, rel_error, run_ablation, step_sweep)
from mvsadapt.metatta import MetaConfig, PretrainConfig
from mvsadapt.mvsnet import Architecture, init_params
from mvsadapt.photoloss import PhotoLossConfig
from mvsadapt.scenegen import SceneSpec, generate_dataset

SLOW = os.environ.get('MVSADAPT_SLOW') == '1'


def tiny_experiment(**meta):
    settings = dict(alpha=0.01, beta=0.01, n_views=2, m_views=2, meta_iterations=1, tta_steps=1,
                    photo=PhotoLossConfig(top_k=2, ssim_window=3))
    settings.update(meta)
    return ExperimentConfig(scene=SceneSpec(height=8, width=8, hypotheses=4, n_views=2, m_views=2),
                            arch=Architecture(feature_channels=(2, 2)),
                            pretrain=PretrainConfig(epochs=1, lr=0.01),
                            meta=MetaConfig(**settings),
                            train_scenes=2, test_scenes=1)


class TestMetrics(unittest.TestCase):

    def setUp(self):
        self.gt = np.array([[2.0, 4.0], [5.0, 3.0]])
        self.valid = np.array([[1.0, 1.0], [1.0, 0.0]])

    def test_rel_error(self):
        '''
        rel is a percentage over valid pixels only.
        '''
        pred = np.array([[2.2, 4.0], [4.5, 100.0]])
        self.assertAlmostEqual(rel_error(pred, self.gt, self.valid), 100 * (0.1 + 0.0 + 0.1) / 3)

    def test_inlier_strict_threshold(self):
        '''
        A ratio exactly at the threshold is not an inlier.
        '''
        gt = np.array([1.0, 1.0, 1.0, 1.0])
        pred = np.array([1.0, 1.25, 1 / 1.02, 0.5])
        valid = np.ones(4)
        self.assertAlmostEqual(inlier_ratio(pred, gt, valid, 1.25), 50.0)
        self.assertAlmostEqual(inlier_ratio(pred, gt, valid, 1.03), 50.0)
        with self.assertRaises(ValueError):
            inlier_ratio(pred, gt, valid, 1.0)

    def test_tau_monotone(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(2, 6, 100)
        pred = gt * rng.uniform(0.9, 1.1, 100)
        valid = np.ones(100)
        self.assertLessEqual(inlier_ratio(pred, gt, valid, 1.03), inlier_ratio(pred, gt, valid, 1.10))

    def test_nonpositive_prediction_is_outlier(self):
        self.assertEqual(inlier_ratio(np.array([0.0]), np.array([1.0]), np.ones(1), 1.1), 0.0)

    def test_empty_mask(self):
        with self.assertRaises(ValueError):
            rel_error(self.gt, self.gt, np.zeros((2, 2)))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(2, 6, 50)
        pred = gt * rng.uniform(0.95, 1.05, 50)
        order = rng.permutation(50)
        valid = np.ones(50)
        self.assertAlmostEqual(rel_error(pred, gt, valid), rel_error(pred[order], gt[order], valid))


class TestEvaluate(unittest.TestCase):

    def setUp(self):
        self.experiment = tiny_experiment()
        self.samples = generate_dataset(self.experiment.scene, 2, 'test')
        self.params = init_params(self.experiment.arch, 0)

    def test_zero_steps_equals_no_adapt(self):
        '''
        Evaluating with zero adaptation steps equals evaluating without
        adaptation.
        '''
        cfg = self.experiment.meta.replace(tta_steps=0)
        a = evaluate(self.params, self.samples, cfg, adapt=True)
        b = evaluate(self.params, self.samples, cfg, adapt=False)
        self.assertEqual(a.rel, b.rel)
        self.assertEqual(a.tau_103, b.tau_103)

    def test_pooled_pixel_count(self):
        preds = predict(self.params, self.samples, self.experiment.meta, adapt=False)
        report = pooled_metrics(preds, self.samples, {'run': 1})
        self.assertEqual(report.pixel_count, int(sum(s.valid.sum() for s in self.samples)))
        self.assertEqual(report.config_echo, {'run': 1})
        self.assertLessEqual(report.tau_103, report.tau_110)
        frame = report.to_frame()
        self.assertListEqual(list(frame.columns), ['pooling', 'rel', 'tau103', 'tau110', 'pixel_count'])

    def test_config_echo_default(self):
        report = evaluate(self.params, self.samples, self.experiment.meta, adapt=False)
        self.assertIn('meta', report.config_echo)
        self.assertEqual(report.config_echo['meta']['alpha'], 0.01)

    def test_empty_test_set(self):
        with self.assertRaises(ValueError):
            evaluate(self.params, [], self.experiment.meta)


class TestHarnesses(unittest.TestCase):

    def setUp(self):
        self.experiment = tiny_experiment()

    def test_ablation_schema(self):
        '''
        Four settings in fixed order, mean and population std per metric.
        '''
        table = run_ablation([0], self.experiment)
        self.assertListEqual(list(table.columns), ABLATION_COLUMNS)
        self.assertListEqual(table['setting'].tolist(), ['baseline', 'baseline+tta', 'meta', 'meta+tta'])
        self.assertTrue((table['rel_std'] == 0.0).all())

    def test_ablation_cross_domain(self):
        test_scene = replace(self.experiment.scene, layout='slanted', brightness_jitter=0.05)
        table = run_ablation([1], self.experiment, test_scene=test_scene)
        self.assertEqual(len(table), 4)

    def test_step_sweep(self):
        curve = step_sweep([0], self.experiment, [2, 0, 1])
        self.assertListEqual(curve['steps'].tolist(), [0, 1, 2])
        with self.assertRaises(ValueError):
            step_sweep([0], self.experiment, [-1])

    def test_k_sweep(self):
        table = k_sweep([0], self.experiment, [1, 2])
        self.assertListEqual(table['k'].tolist(), [1, 2])
        with self.assertRaises(ValueError):
            k_sweep([0], self.experiment, [3])

    def test_return_predictions(self):
        '''
        Harnesses can hand back the last seed's test samples with one depth
        map per sample at the configured setting.
        '''
        curve, test, preds = step_sweep([0], self.experiment, [0, 1], return_predictions=True)
        self.assertEqual(len(preds), len(test))
        self.assertEqual(preds[0].shape, (8, 8))
        row = curve[curve['steps'] == self.experiment.meta.tta_steps].iloc[0]
        self.assertAlmostEqual(pooled_metrics(preds, test).rel, row['rel'])
        table, test, preds = k_sweep([0], self.experiment, [1, 2], return_predictions=True)
        self.assertEqual(len(table), 2)
        self.assertEqual(len(preds), len(test))
        table, test, preds = run_ablation([0], self.experiment, return_predictions=True)
        row = table[table['setting'] == 'meta+tta'].iloc[0]
        self.assertAlmostEqual(pooled_metrics(preds, test).rel, row['rel_mean'])

    def test_deterministic(self):
        a = step_sweep([0], self.experiment, [0, 1])
        b = step_sweep([0], self.experiment, [0, 1])
        self.assertTrue(a.equals(b))


@unittest.skipUnless(SLOW, 'set MVSADAPT_SLOW=1 for the seeded acceptance runs')
class TestAcceptance(unittest.TestCase):

    def setUp(self):
        self.experiment = ExperimentConfig()
        self.seeds = list(range(10))

    def test_ablation_ordering(self):
        table = run_ablation(self.seeds, self.experiment).set_index('setting')
        self.assertLessEqual(table.loc['meta+tta', 'rel_mean'], table.loc['baseline', 'rel_mean'])
        self.assertGreaterEqual(table.loc['baseline+tta', 'rel_mean'], table.loc['meta+tta', 'rel_mean'])

    def test_step_curve_shape(self):
        curve = step_sweep(self.seeds, self.experiment, [0, 1, 2, 4, 8, 16]).set_index('steps')
        self.assertLessEqual(curve.loc[2, 'rel'], curve.loc[0, 'rel'])
        self.assertGreater(curve.loc[16, 'rel'], curve['rel'].min())

    def test_k_spread(self):
        table = k_sweep(self.seeds, self.experiment, [1, 2, 3, 4]).set_index('k')
        spread = table.loc[[2, 3, 4], 'tau103']
        self.assertLessEqual(spread.max() - spread.min(), 1.0)
        self.assertLess(table.loc[1, 'tau103'], spread.min())


if __name__ == '__main__':
    unittest.main()
