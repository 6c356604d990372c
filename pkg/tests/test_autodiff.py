import unittest

import numpy as np

from mvsadapt import autodiff as ad


class TestTape(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.tape = ad.Tape()
        self.a = self.tape.leaf(self.rng.uniform(-1, 1, (3, 4)))
        self.b = self.tape.leaf(self.rng.uniform(-1, 1, 4))

    def test_broadcast_add_gradient(self):
        '''
        Gradient of a broadcast operand sums over the broadcast axis.
        '''
        loss = ad.sum_(ad.add(self.a, self.b))
        ga, gb = ad.backward(loss, [self.a, self.b])
        np.testing.assert_array_equal(ga.value, np.ones((3, 4)))
        np.testing.assert_array_equal(gb.value, np.full(4, 3.0))

    def test_mul_gradient(self):
        '''
        d sum(a * b) / d a equals b broadcast.
        '''
        loss = ad.sum_(ad.mul(self.a, self.b))
        (ga,) = ad.backward(loss, [self.a])
        np.testing.assert_allclose(ga.value, np.broadcast_to(self.b.value, (3, 4)))

    def test_second_order(self):
        '''
        Differentiating the recorded gradient of sum(x**3) gives 6x.
        '''
        x = self.tape.leaf(self.rng.uniform(-1, 1, 5))
        loss = ad.sum_(ad.mul(ad.mul(x, x), x))
        (g,) = ad.backward(loss, [x], create_graph=True)
        np.testing.assert_allclose(g.value, 3 * x.value ** 2)
        (h,) = ad.backward(ad.sum_(g), [x])
        np.testing.assert_allclose(h.value, 6 * x.value)

    def test_unreachable_leaf_gets_zeros(self):
        '''
        A leaf the loss does not depend on receives a zero gradient.
        '''
        loss = ad.sum_(ad.exp(self.b))
        (ga,) = ad.backward(loss, [self.a])
        np.testing.assert_array_equal(ga.value, np.zeros((3, 4)))

    def test_intermediate_leaf(self):
        '''
        Gradients can be taken with respect to intermediate results.
        '''
        mid = ad.mul(self.a, 2.0)
        loss = ad.sum_(ad.square(mid))
        (g,) = ad.backward(loss, [mid])
        np.testing.assert_allclose(g.value, 2 * mid.value)

    def test_non_finite_raises(self):
        '''
        A non-finite forward value raises FloatingPointError naming the op.
        '''
        with np.errstate(over='ignore'):
            with self.assertRaises(FloatingPointError) as ctx:
                ad.exp(ad.add(self.b, 1e5))
        self.assertIn('exp', str(ctx.exception))

    def test_mixed_tapes_raise(self):
        '''
        Combining Vars of two tapes is refused.
        '''
        other = ad.Tape().leaf(np.ones(4))
        with self.assertRaises(ValueError):
            ad.add(self.b, other)

    def test_backward_needs_scalar(self):
        with self.assertRaises(ValueError):
            ad.backward(ad.mul(self.a, 1.0), [self.a])

    def test_not_recording_returns_constants(self):
        '''
        With recording switched off operations yield constants.
        '''
        with self.tape.recording_as(False):
            out = ad.mul(self.a, 2.0)
        self.assertIsNone(out.tape)
        self.assertTrue(self.tape.recording)

    def test_recorded_values_read_only(self):
        out = ad.add(self.a, 1.0)
        with self.assertRaises(ValueError):
            out.value[0, 0] = 5.0

    def test_dunder_operators(self):
        '''
        Operator overloads route to the recorded operations.
        '''
        loss = ((self.a * 2.0 + 1.0) / 4.0 - self.b).sum()
        (ga,) = ad.backward(loss, [self.a])
        np.testing.assert_allclose(ga.value, np.full((3, 4), 0.5))


class TestOperations(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_gather_minus_one_reads_zero(self):
        x = ad.constant(np.arange(1.0, 7.0))
        out = ad.gather(x, np.array([[0, -1], [5, 2]]))
        np.testing.assert_array_equal(out.value, [[1.0, 0.0], [6.0, 3.0]])

    def test_gather_out_of_range(self):
        with self.assertRaises(ValueError):
            ad.gather(ad.constant(np.ones(3)), np.array([3]))

    def test_scatter_is_gather_adjoint(self):
        '''
        <gather(x), g> equals <x, scatter(g)>.
        '''
        x = self.rng.uniform(-1, 1, 6)
        index = np.array([0, 3, 3, 6, 1])
        g = self.rng.uniform(-1, 1, 5)
        gathered = ad.gather(ad.constant(x), np.where(index == 6, -1, index)).value
        scattered = ad.scatter(ad.constant(g), index, (6,)).value
        self.assertAlmostEqual(float(gathered @ g), float(x @ scattered), places=12)

    def test_box_sum_zero_padding(self):
        '''
        Window sums of ones count the in-bounds cells.
        '''
        out = ad.box_sum(ad.constant(np.ones((5, 5, 1))), 3).value[:, :, 0]
        self.assertAlmostEqual(out[2, 2], 9.0)
        self.assertAlmostEqual(out[0, 0], 4.0)
        self.assertAlmostEqual(out[0, 2], 6.0)

    def test_softmax_rows_sum_to_one(self):
        out = ad.softmax(ad.constant(self.rng.normal(size=(4, 6))), axis=1).value
        np.testing.assert_allclose(out.sum(axis=1), np.ones(4))

    def test_conv2d_identity_kernel(self):
        '''
        A centre-tap kernel reproduces its input.
        '''
        x = self.rng.uniform(size=(5, 6, 2))
        weight = np.zeros((18, 2))
        weight[4 * 2 + 0, 0] = 1.0
        weight[4 * 2 + 1, 1] = 1.0
        out = ad.conv2d(x, weight, np.zeros(2)).value
        np.testing.assert_allclose(out, x)

    def test_convolve_edge_axis(self):
        '''
        Edge replication along an axis keeps a constant signal constant.
        '''
        x = np.ones((3, 3, 4, 1))
        weight = np.ones((27, 1))
        out = ad.convolve(x, weight, np.zeros(1), 3, edge_axes=(2,)).value[1, 1, :, 0]
        np.testing.assert_allclose(out, np.full(4, 27.0))

    def test_bilinear_sample(self):
        '''
        Bilinear interpolation of a linear ramp is exact; samples outside the
        grid read zero.
        '''
        ys, xs = np.mgrid[0:4, 0:5]
        grid = (2.0 * xs + 3.0 * ys)[:, :, None].astype(np.float64)
        x = np.array([0.5, 3.25, 4.0, -0.5])
        y = np.array([1.5, 2.75, 3.0, 1.0])
        values, inside = ad.bilinear_sample(grid, x, y)
        np.testing.assert_allclose(values.value[:3, 0], 2.0 * x[:3] + 3.0 * y[:3])
        self.assertEqual(values.value[3, 0], 0.0)
        np.testing.assert_array_equal(inside, [True, True, True, False])

    def test_huber(self):
        out = ad.huber(ad.constant([0.05, -0.3]), 0.1).value
        np.testing.assert_allclose(out, [0.00125, 0.025])

    def test_take_along_axis(self):
        x = ad.constant(np.array([[3.0, 1.0, 2.0]]))
        out = ad.take_along_axis(x, np.array([[1, 2]]), 1)
        np.testing.assert_array_equal(out.value, [[1.0, 2.0]])

    def test_reshape_infers_minus_one(self):
        '''
        A -1 entry is inferred from the element count, forward and backward.
        '''
        x = self.rng.uniform(-1, 1, (2, 3, 4))
        flat = ad.reshape(ad.constant(x), (-1,))
        self.assertEqual(flat.shape, (24,))
        np.testing.assert_array_equal(flat.value, x.reshape(-1))
        rows = ad.reshape(ad.constant(x), (-1, 4))
        self.assertEqual(rows.shape, (6, 4))
        np.testing.assert_array_equal(rows.value, x.reshape(-1, 4))

        weights = self.rng.uniform(-1, 1, (6, 4))

        def fn(p):
            cube = ad.reshape(p, (2, 3, 4))
            return ad.sum_(ad.mul(ad.reshape(ad.mul(cube, cube), (-1, 4)), weights))
        self.assertLess(ad.check_gradient(fn, self.rng.uniform(-1, 1, 24)), 1e-6)

        p = ad.Tape().leaf(x)
        loss = ad.sum_(ad.mul(ad.reshape(p, (-1,)), np.arange(24.0)))
        (grad,) = ad.backward(loss, [p])
        np.testing.assert_array_equal(grad.value, np.arange(24.0).reshape(2, 3, 4))

    def test_reshape_invalid_shapes(self):
        x = ad.constant(np.zeros(24))
        with self.assertRaises(ValueError):
            ad.reshape(x, (-1, -1))
        with self.assertRaises(ValueError):
            ad.reshape(x, (-1, 5))
        with self.assertRaises(ValueError):
            ad.reshape(x, (-2, 12))

    def test_record_dispatch(self):
        out = ad.record('add', np.ones(2), np.ones(2))
        np.testing.assert_array_equal(out.value, [2.0, 2.0])
        with self.assertRaises(ValueError):
            ad.record('no-such-op', np.ones(2))

    def test_check_gradient(self):
        '''
        Finite differences agree with the tape on a smooth composite.
        '''
        def fn(p):
            return ad.sum_(ad.mul(ad.exp(p), ad.log(ad.add(p, 2.0))))
        error = ad.check_gradient(fn, self.rng.uniform(-1, 1, 7))
        self.assertLess(error, 1e-6)


if __name__ == '__main__':
    unittest.main()
