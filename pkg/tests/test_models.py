import contextlib
import io
import os
import tempfile
import unittest

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from mvsadapt.figures import plot_depth_panel, plot_step_curve
from mvsadapt.metatta import MetaConfig, PretrainConfig
from mvsadapt.models import MetaAuxiliaryLearner, SupervisedPretrainer, TrainingResult
from mvsadapt.mvsnet import Architecture, init_params
from mvsadapt.photoloss import PhotoLossConfig
from mvsadapt.scenegen import SceneSpec, generate_dataset

TINY_SCENE = SceneSpec(height=8, width=8, hypotheses=4, n_views=2, m_views=2)
TINY_META = MetaConfig(alpha=0.01, beta=0.01, n_views=2, m_views=2, meta_iterations=2,
                       photo=PhotoLossConfig(top_k=2, ssim_window=3))


class TestSupervisedPretrainer(unittest.TestCase):

    def setUp(self):
        self.params = init_params(Architecture(feature_channels=(2, 2)), 0)
        self.dataset = generate_dataset(TINY_SCENE, 2, 'train')

    def test_fit(self):
        '''
        Fitting stores a result with one trace row per epoch.
        '''
        model = SupervisedPretrainer(params=self.params, n_views=2)
        model.fit(dataset=self.dataset, config=PretrainConfig(epochs=2, lr=0.01), progress=False)
        results = model.get_results()
        self.assertIsInstance(results, TrainingResult)
        self.assertEqual(len(results.trace), 2)
        self.assertEqual(results.settings['epochs'], 2)
        self.assertGreaterEqual(results.seconds, 0.0)
        self.assertFalse(np.array_equal(results.params.values, self.params.values))

    def test_type_errors(self):
        with self.assertRaises(TypeError):
            SupervisedPretrainer(params=self.params.values)
        model = SupervisedPretrainer(params=self.params, n_views=2)
        with self.assertRaises(TypeError):
            model.fit(dataset=[])
        with self.assertRaises(TypeError):
            model.fit(dataset=tuple(self.dataset))


class TestMetaAuxiliaryLearner(unittest.TestCase):

    def setUp(self):
        self.params = init_params(Architecture(feature_channels=(2, 2)), 0)
        self.dataset = generate_dataset(TINY_SCENE, 2, 'train')
        self.model = MetaAuxiliaryLearner(params=self.params)
        self.model.fit(dataset=self.dataset, config=TINY_META, progress=False)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()
        plt.close('all')

    def test_settings_flatten_photo(self):
        settings = self.model.get_results().settings
        self.assertEqual(settings['alpha'], 0.01)
        self.assertEqual(settings['photo']['top_k'], 2)

    def test_save_to_csv(self):
        '''
        The saved trace is deterministic and reloads with the same columns.
        '''
        first = os.path.join(self.tmp.name, 'a.csv')
        second = os.path.join(self.tmp.name, 'b.csv')
        self.model.get_results().save_to_csv(first)
        MetaAuxiliaryLearner(params=self.params).fit(
            dataset=self.dataset, config=TINY_META, progress=False).get_results().save_to_csv(second)
        with open(first) as f, open(second) as g:
            self.assertEqual(f.read(), g.read())
        loaded = pd.read_csv(first)
        self.assertListEqual(list(loaded.columns), ['iteration', 'inner_loss', 'outer_loss', 'grad_norm'])

    def test_summary(self):
        buffer = io.StringIO()
        with contextlib.redirect_stdout(buffer):
            self.model.get_results().summary()
        text = buffer.getvalue()
        self.assertIn('Meta-auxiliary training', text)
        self.assertIn('outer_loss', text)
        self.assertIn(str(self.params.arch.param_count), text)

    def test_plot(self):
        fig = self.model.get_results().plot()
        self.assertEqual(len(fig.axes), 1)
        self.assertGreaterEqual(len(fig.axes[0].lines), 2)


class TestFigures(unittest.TestCase):

    def tearDown(self):
        plt.close('all')

    def test_step_curve(self):
        curve = pd.DataFrame({'steps': [0, 1, 2], 'rel': [5.0, 4.0, 4.5],
                              'tau103': [10.0, 12.0, 11.0], 'tau110': [30.0, 33.0, 32.0]})
        ax = plot_step_curve(curve)
        self.assertEqual(ax.get_xlabel(), 'test-time adaptation steps')
        self.assertEqual(len(ax.lines), 2)

    def test_depth_panel(self):
        sample = generate_dataset(TINY_SCENE, 1, 'test')[0]
        fig = plot_depth_panel(sample.reference.image, sample.gt_depth, sample.gt_depth,
                               sample.valid, TINY_SCENE.d_min, TINY_SCENE.d_max)
        self.assertEqual(len([ax for ax in fig.axes if ax.images]), 4)


if __name__ == '__main__':
    unittest.main()
