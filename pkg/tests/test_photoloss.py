import unittest

import numpy as np

from mvsadapt import autodiff as ad
from mvsadapt.geometry import PosedImage
from mvsadapt.photoloss import (PhotoLossConfig, _masked_ssim_map, huber, image_gradient,
                                photometric_loss, photometric_loss_from_depth,
                                reproj_error_per_view, ssim_loss, topk_reproj, topk_selection)
from mvsadapt.mvsnet import Architecture, init_params
from mvsadapt.scenegen import SceneSpec, generate_scene


class TestTerms(unittest.TestCase):

    def setUp(self):
        self.cfg = PhotoLossConfig(ssim_window=3)
        self.rng = np.random.default_rng(0)

    def test_huber_values(self):
        self.assertAlmostEqual(huber(0.05, 0.1), 0.00125)
        self.assertAlmostEqual(huber(-0.3, 0.1), 0.025)
        with self.assertRaises(ValueError):
            huber(1.0, 0.0)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            PhotoLossConfig(ssim_window=4)
        with self.assertRaises(ValueError):
            PhotoLossConfig(top_k=0)

    def test_image_gradient_ramp(self):
        '''
        A horizontal ramp has constant x gradient (zero on the last column)
        and no y gradient.
        '''
        ramp = np.tile((0.1 * np.arange(5))[None, :, None], (4, 1, 3))
        gx, gy = image_gradient(ramp)
        np.testing.assert_allclose(gx.value[:, :-1], 0.1)
        np.testing.assert_array_equal(gx.value[:, -1], 0.0)
        np.testing.assert_allclose(gy.value, 0.0, atol=1e-15)

    def test_reproj_zero_for_identical(self):
        image = self.rng.uniform(size=(6, 7, 3))
        error = reproj_error_per_view(image, ad.constant(image), np.ones((6, 7)), self.cfg)
        np.testing.assert_allclose(error.value, 0.0)

    def test_reproj_masked(self):
        '''
        Pixels outside the visibility mask carry no error.
        '''
        ref = self.rng.uniform(size=(6, 7, 3))
        warped = ad.constant(self.rng.uniform(size=(6, 7, 3)))
        mask = np.ones((6, 7))
        mask[2:4, 3:5] = 0.0
        error = reproj_error_per_view(ref, warped, mask, self.cfg).value
        np.testing.assert_array_equal(error[2:4, 3:5], 0.0)
        self.assertTrue(np.all(error[mask > 0] > 0))

    def test_topk_ties_prefer_lower_index(self):
        values = np.ones((1, 1, 4))
        masks = [np.ones((1, 1))] * 4
        selected = topk_selection(values, masks, 2)
        np.testing.assert_array_equal(selected[0, 0], [True, True, False, False])

    def test_topk_skips_invisible(self):
        '''
        Invisible views are never selected; with fewer visible views than k
        all visible ones are summed.
        '''
        maps = [ad.constant(np.full((1, 2), v)) for v in (1.0, 5.0, 3.0)]
        masks = [np.array([[0.0, 1.0]]), np.array([[1.0, 1.0]]), np.array([[0.0, 1.0]])]
        loss = topk_reproj(maps, masks, 2).value
        # pixel 0: only view 1 (5.0); pixel 1: views 0 and 2 (1.0 + 3.0)
        self.assertAlmostEqual(float(loss), (5.0 + 4.0) / 2)
        with self.assertRaises(ValueError):
            topk_reproj(maps, masks, 4)

    def test_topk_monotone_in_k(self):
        '''
        Each extra selected view adds a nonnegative term, so the loss never
        falls as k grows.
        '''
        maps = [ad.constant(self.rng.uniform(0, 1, (6, 7))) for _ in range(4)]
        masks = [(self.rng.random((6, 7)) > 0.3).astype(np.float64) for _ in range(4)]
        losses = [float(topk_reproj(maps, masks, k).value) for k in range(1, 5)]
        self.assertTrue(all(a <= b for a, b in zip(losses, losses[1:])))
        self.assertLess(losses[0], losses[-1])

    def test_ssim_inverted_image(self):
        '''
        An intensity-inverted view is maximally dissimilar.
        '''
        image = self.rng.uniform(size=(12, 12, 3))
        loss = float(ssim_loss(image, [ad.constant(1.0 - image)], [np.ones((12, 12))], self.cfg).value)
        self.assertGreater(loss, 0.9)
        self.assertLessEqual(loss, 1.0)

    def test_ssim_identical_images(self):
        image = self.rng.uniform(size=(8, 8, 3))
        loss = ssim_loss(image, [ad.constant(image)], [np.ones((8, 8))], self.cfg)
        self.assertAlmostEqual(float(loss.value), 0.0, places=12)

    def test_ssim_nothing_visible(self):
        image = self.rng.uniform(size=(8, 8, 3))
        loss = ssim_loss(image, [ad.constant(image)], [np.zeros((8, 8))], self.cfg)
        self.assertEqual(float(loss.value), 0.0)

    def test_ssim_direct_statistics(self):
        '''
        Box-filtered SSIM matches statistics computed directly on a window.
        '''
        ref = self.rng.uniform(size=(9, 9, 3))
        warped = self.rng.uniform(size=(9, 9, 3))
        ssim = _masked_ssim_map(ref, ad.constant(warped), np.ones((9, 9)), self.cfg).value
        for c in range(3):
            x = ref[3:6, 3:6, c].ravel()
            y = warped[3:6, 3:6, c].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = x.var(), y.var()
            cov = np.mean((x - mx) * (y - my))
            c1, c2 = self.cfg.ssim_c1, self.cfg.ssim_c2
            expected = (2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
            self.assertAlmostEqual(ssim[4, 4, c], expected, places=10)

    def test_ssim_window_too_large(self):
        image = self.rng.uniform(size=(8, 8, 3))
        with self.assertRaises(ValueError):
            ssim_loss(image, [ad.constant(image)], [np.ones((8, 8))], PhotoLossConfig(ssim_window=9))


class TestPhotometricLoss(unittest.TestCase):

    def setUp(self):
        self.spec = SceneSpec()
        self.cfg = PhotoLossConfig()

    def _filled(self, sample):
        fill = 0.5 * (self.spec.d_min + self.spec.d_max)
        return np.where(sample.valid > 0, sample.gt_depth, fill)

    def test_ground_truth_beats_scaled_depth(self):
        '''
        The loss at the true depth is lower than at a 5% scaled depth on
        nearly every scene.
        '''
        wins = 0
        for seed in range(5):
            sample = generate_scene(self.spec, seed)
            depth = self._filled(sample)
            at_gt = float(photometric_loss_from_depth(depth, sample.views, self.cfg).value)
            scaled = float(photometric_loss_from_depth(1.05 * depth, sample.views, self.cfg).value)
            wins += at_gt < scaled
        self.assertGreaterEqual(wins, 4)

    def test_black_views(self):
        '''
        All-black views agree photometrically at any depth.
        '''
        sample = generate_scene(SceneSpec(height=8, width=8, hypotheses=4, n_views=2, m_views=2), 0)
        views = [PosedImage(np.zeros_like(v.image), v.intrinsics, v.pose) for v in sample.views]
        cfg = PhotoLossConfig(top_k=2, ssim_window=3)
        for depth in (2.5, 4.0, 5.5):
            loss = photometric_loss_from_depth(np.full((8, 8), depth), views, cfg)
            self.assertAlmostEqual(float(loss.value), 0.0, places=12)

    def test_top_k_exceeding_views(self):
        sample = generate_scene(SceneSpec(height=8, width=8, hypotheses=4, n_views=2, m_views=2), 0)
        with self.assertRaises(ValueError):
            photometric_loss_from_depth(np.full((8, 8), 4.0), sample.views,
                                        PhotoLossConfig(top_k=3, ssim_window=3))

    def test_network_loss_gradient(self):
        '''
        The photometric loss of the network output passes a
        finite-difference check.
        '''
        spec = SceneSpec(height=8, width=8, hypotheses=4, n_views=2, m_views=2)
        sample = generate_scene(spec, 1)
        params = init_params(Architecture(feature_channels=(2, 2)), 1)
        cfg = PhotoLossConfig(top_k=2, ssim_window=3)

        def fn(theta):
            return photometric_loss(params.with_theta(theta), sample.views, sample.hyps, cfg, 2)
        self.assertLess(ad.check_gradient(fn, params.values), 1e-5)


if __name__ == '__main__':
    unittest.main()
