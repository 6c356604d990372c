import unittest

import numpy as np

from mvsadapt import autodiff as ad
from mvsadapt.gradcheck import (CLOSED_FORM_TOL, COMPOSITE_TOL, META_FD_TOL, PRIMITIVE_TOL,
                                _primitive_cases, _unpack, inverse_warp_error,
                                meta_composition_error, primitive_errors, quadratic_meta_error,
                                run_suite)


class TestPrimitiveChecks(unittest.TestCase):

    def test_primitives_pass(self):
        '''
        First- and second-order derivatives of every operation agree with
        finite differences.
        '''
        for seed in range(3):
            for name, error in primitive_errors(seed):
                with self.subTest(seed=seed, check=name):
                    self.assertLess(error, PRIMITIVE_TOL)

    def test_declared_sizes_match_shapes(self):
        '''
        Every case evaluates at a point of its declared size, and packing a
        point of the wrong size is rejected.
        '''
        for name, fn, size in _primitive_cases(np.random.default_rng(0)):
            with self.subTest(check=name):
                out = fn(ad.constant(np.zeros(size)))
                self.assertTrue(np.all(np.isfinite(out.value)))
        conv = dict((name, size) for name, _, size in _primitive_cases(np.random.default_rng(0)))['conv2d']
        self.assertEqual(conv, 5 * 5 * 2 + 18 * 3 + 3)
        with self.assertRaises(ValueError):
            _unpack(ad.constant(np.zeros(71)), (5, 5, 2), (18, 3), (3,))
        with self.assertRaises(ValueError):
            _unpack(ad.constant(np.zeros(17)), (3, 4), (4,))

    def test_second_order_cases_present(self):
        names = [name for name, _ in primitive_errors(0)]
        self.assertTrue(any(n.endswith(':second-order') for n in names))
        self.assertEqual(len(names) % 2, 0)

    def test_quadratic_closed_form(self):
        for seed in range(5):
            self.assertLess(quadratic_meta_error(seed), CLOSED_FORM_TOL)


class TestCompositeChecks(unittest.TestCase):

    def test_inverse_warp(self):
        self.assertLess(inverse_warp_error(0), COMPOSITE_TOL)

    def test_meta_gradient_through_photometric_step(self):
        '''
        The second-order meta-gradient matches finite differences of the
        composed objective.
        '''
        self.assertLess(meta_composition_error(0), META_FD_TOL)


class TestSuite(unittest.TestCase):

    def test_report_schema(self):
        report = run_suite(seeds=range(1), composite_seeds=range(1))
        self.assertListEqual(list(report.columns), ['check', 'seed', 'max_error', 'tolerance', 'passed'])
        self.assertIn('meta-quadratic', report['check'].tolist())
        self.assertIn('photometric', report['check'].tolist())
        self.assertTrue(report['passed'].all())


if __name__ == '__main__':
    unittest.main()
