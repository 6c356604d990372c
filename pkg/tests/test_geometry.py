import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from mvsadapt import autodiff as ad
from mvsadapt.geometry import (Camera, DepthHypotheses, Intrinsics, PosedImage, Pose,
                               apply_homography, backproject, homography, inverse_warp,
                               pixel_rays, principal_axis, project)


def random_pose(seed, radius=0.5):
    R = Rotation.random(random_state=seed).as_matrix()
    center = np.random.default_rng(seed).uniform(-radius, radius, 3)
    return Pose(R, -R @ center)


class TestCameraTypes(unittest.TestCase):

    def test_intrinsics_validation(self):
        '''
        Non-triangular or non-positive calibration matrices are rejected.
        '''
        with self.assertRaises(ValueError):
            Intrinsics(np.ones((3, 3)))
        with self.assertRaises(ValueError):
            Intrinsics.from_focal(-10.0, 10.0, 4.0, 4.0)

    def test_pose_validation(self):
        with self.assertRaises(ValueError):
            Pose(2 * np.eye(3), np.zeros(3))
        with self.assertRaises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_look_at_forward(self):
        '''
        A camera at the origin looking down +z with the default up vector
        has the identity rotation.
        '''
        pose = Pose.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 5.0))
        np.testing.assert_allclose(pose.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(principal_axis(pose), [0.0, 0.0, 1.0], atol=1e-12)

    def test_look_at_center(self):
        pose = Pose.look_at((0.3, -0.2, 0.1), (0.0, 0.0, 4.0))
        np.testing.assert_allclose(pose.center, [0.3, -0.2, 0.1], atol=1e-12)

    def test_posed_image_validation(self):
        K = Intrinsics.from_focal(8.0, 8.0, 3.5, 3.5)
        with self.assertRaises(ValueError):
            PosedImage(np.zeros((4, 4, 3)), K, Pose.identity())
        with self.assertRaises(ValueError):
            PosedImage(np.full((8, 8, 3), 1.5), K, Pose.identity())

    def test_hypotheses(self):
        hyps = DepthHypotheses(2.0, 6.0, 16)
        self.assertAlmostEqual(hyps.interval, 4.0 / 15.0)
        self.assertEqual(hyps.values[0], 2.0)
        self.assertEqual(hyps.values[-1], 6.0)
        with self.assertRaises(ValueError):
            DepthHypotheses(3.0, 2.0, 4)


class TestHomography(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.from_focal(48.0, 48.0, 23.5, 15.5)

    def test_identity(self):
        '''
        Identical cameras give the identity homography at every depth.
        '''
        cam = Camera(self.K, random_pose(3))
        for d in (0.5, 2.0, 10.0):
            np.testing.assert_allclose(homography(cam, cam, d), np.eye(3), atol=1e-9)

    def test_pure_rotation(self):
        '''
        With a shared centre the homography is K R_s R_r^T K^-1 at any depth.
        '''
        ref = Camera(self.K, Pose.identity())
        R = Rotation.from_euler('xyz', [0.05, -0.1, 0.02]).as_matrix()
        src = Camera(self.K, Pose(R, np.zeros(3)))
        expected = self.K.K @ R @ np.linalg.inv(self.K.K)
        for d in (1.0, 3.0):
            np.testing.assert_allclose(homography(ref, src, d), expected, atol=1e-9)

    def test_matches_backproject_reproject(self):
        '''
        Mapping a pixel through H(d) agrees with lifting it to depth d and
        projecting into the source camera.
        '''
        rng = np.random.default_rng(0)
        for seed in range(10):
            ref = Camera(self.K, random_pose(seed))
            src = Camera(self.K, random_pose(seed + 100))
            u = rng.uniform(0, 40, (5, 2))
            d = rng.uniform(2.0, 6.0)
            points = backproject(u, np.full(5, d), ref)
            expected, z = project(points, src)
            mapped, valid = apply_homography(homography(ref, src, d), u)
            near = np.abs(z) > 1e-3
            np.testing.assert_allclose(mapped[near], expected[near], atol=1e-9)
            self.assertTrue(valid[near].all())

    def test_round_trip(self):
        '''
        Pixels sent to the source view through H(d) come back to where they
        started, both through the inverse homography and by lifting them at
        their source depth.
        '''
        rng = np.random.default_rng(1)
        ref = Camera(self.K, Pose.identity())
        for seed in range(5):
            R = Rotation.from_euler('xyz', rng.uniform(-0.1, 0.1, 3)).as_matrix()
            src = Camera(self.K, Pose(R, rng.uniform(-0.3, 0.3, 3)))
            u = rng.uniform(0, 40, (6, 2))
            d = rng.uniform(2.0, 6.0)
            H = homography(ref, src, d)
            mapped, valid = apply_homography(H, u)
            self.assertTrue(valid.all())
            back, _ = apply_homography(np.linalg.inv(H), mapped)
            np.testing.assert_allclose(back, u, atol=1e-8)
            _, z = project(backproject(u, np.full(6, d), ref), src)
            lifted, z_ref = project(backproject(mapped, z, src), ref)
            np.testing.assert_allclose(lifted, u, atol=1e-8)
            np.testing.assert_allclose(z_ref, d, atol=1e-9)

    def test_var_depth(self):
        '''
        A Var depth yields a Var homography with the same value.
        '''
        ref = Camera(self.K, Pose.identity())
        src = Camera(self.K, random_pose(4))
        leaf = ad.Tape().leaf(np.array(2.5))
        H = homography(ref, src, leaf)
        np.testing.assert_allclose(H.value, homography(ref, src, 2.5))

    def test_nonpositive_depth(self):
        cam = Camera(self.K, Pose.identity())
        with self.assertRaises(ValueError):
            homography(cam, cam, 0.0)

    def test_degenerate_homogeneous(self):
        '''
        A vanishing homogeneous component flags the point invalid.
        '''
        H = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0]])
        _, valid = apply_homography(H, np.array([[1.0, 2.0]]))
        self.assertFalse(valid[0])


class TestWarping(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(5)
        self.K = Intrinsics.from_focal(12.0, 12.0, 5.5, 4.5)
        self.view = PosedImage(rng.uniform(size=(10, 12, 3)), self.K, Pose.identity())

    def test_identity_warp(self):
        '''
        Warping a view onto its own camera returns the image with a full mask.
        '''
        depth = np.random.default_rng(1).uniform(2.0, 5.0, (10, 12))
        warped, mask = inverse_warp(self.view, self.view.camera, depth)
        np.testing.assert_allclose(warped.value, self.view.image, atol=1e-9)
        np.testing.assert_array_equal(mask, np.ones((10, 12)))

    def test_warp_needs_positive_depth(self):
        with self.assertRaises(ValueError):
            inverse_warp(self.view, self.view.camera, np.zeros((10, 12)))

    def test_warp_gradient(self):
        '''
        The warp is differentiable with respect to depth.
        '''
        pose = Pose.look_at((0.2, 0.0, 0.0), (0.0, 0.0, 4.0))
        src = PosedImage(self.view.image, self.K, pose)
        weights = np.random.default_rng(2).uniform(-1, 1, (10, 12, 3))
        depth = np.random.default_rng(3).uniform(3.5, 4.5, (10, 12))

        def fn(d):
            warped, _ = inverse_warp(src, self.view.camera, d)
            return ad.sum_(ad.mul(warped, weights))
        self.assertLess(ad.check_gradient(fn, depth), 1e-5)

    def test_pixel_rays_unit_depth(self):
        rays = pixel_rays(self.view.camera, 10, 12)
        np.testing.assert_allclose(rays[:, 2], np.ones(120))


if __name__ == '__main__':
    unittest.main()
