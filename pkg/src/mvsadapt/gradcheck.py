# Module containing the gradient-check suite

import logging

import numpy as np
import pandas as pd
from rich.progress import track

from mvsadapt import autodiff as ad
from mvsadapt.geometry import inverse_warp
from mvsadapt.metatta import gradient_steps, meta_gradient
from mvsadapt.mvsnet import Architecture, forward, init_params, primary_loss
from mvsadapt.photoloss import PhotoLossConfig, photometric_loss
from mvsadapt.scenegen import SceneSpec, generate_scene

logger = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-5
META_FD_TOL = 1e-4
CLOSED_FORM_TOL = 1e-10

TINY_ARCH = Architecture(feature_channels=(2, 2))
TINY_SCENE = SceneSpec(height=8, width=8, hypotheses=4, n_views=2, m_views=2)
TINY_PHOTO = PhotoLossConfig(top_k=2, ssim_window=3)


def _unpack(p, *shapes):
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(ad.reshape(p[offset:offset + size], shape))
        offset += size
    if offset != p.shape[0]:
        raise ValueError(f"Packed point has {p.shape[0]} values, shapes {shapes} need {offset}.")
    return out


def _primitive_cases(rng):
    """
    (name, function of a packed parameter Var, point size)
    for every primitive and composite operation.
    """
    cond = rng.random((3, 4)) > 0.5
    gather_index = rng.integers(-1, 12, size=(5, 2))
    select_data = rng.random((3, 5))
    select_index = np.argsort(select_data, axis=1, kind='stable')[:, :2]
    return [
        ('add', lambda p: ad.add(*_unpack(p, (3, 4), (4,))), 16),
        ('sub', lambda p: ad.sub(*_unpack(p, (3, 4), (3, 1))), 15),
        ('mul', lambda p: ad.mul(*_unpack(p, (3, 4), (4,))), 16),
        ('div', lambda p: (lambda a, b: ad.div(a, ad.add(2.0, b)))(*_unpack(p, (3, 4), (4,))), 16),
        ('neg', lambda p: ad.neg(p), 6),
        ('matmul', lambda p: ad.matmul(*_unpack(p, (3, 4), (4, 2))), 20),
        ('transpose', lambda p: ad.transpose(ad.reshape(p, (2, 3, 4)), (2, 0, 1)), 24),
        ('reshape', lambda p: ad.reshape(p, (3, 4)), 12),
        ('sum', lambda p: ad.sum_(ad.reshape(p, (3, 4)), axis=0), 12),
        ('mean', lambda p: ad.mean(ad.reshape(p, (3, 4)), axis=1, keepdims=True), 12),
        ('broadcast_to', lambda p: ad.broadcast_to(ad.reshape(p, (1, 4)), (3, 4)), 4),
        ('exp', lambda p: ad.exp(p), 6),
        ('log', lambda p: ad.log(ad.add(2.0, p)), 6),
        ('elu', lambda p: ad.elu(p), 6),
        ('abs', lambda p: ad.abs_(p), 6),
        ('square', lambda p: ad.square(p), 6),
        ('where', lambda p: ad.where(cond, *_unpack(p, (3, 4), (4,))), 16),
        ('gather', lambda p: ad.gather(ad.reshape(p, (3, 4)), gather_index), 12),
        ('select', lambda p: ad.take_along_axis(ad.reshape(p, (3, 5)), select_index, 1), 15),
        ('softmax', lambda p: ad.softmax(ad.reshape(p, (3, 5)), axis=1), 15),
        ('box_sum', lambda p: ad.box_sum(ad.reshape(p, (5, 6, 2)), 3), 60),
        ('stack', lambda p: ad.stack(_unpack(p, (2, 3), (2, 3), (2, 3)), axis=1), 18),
        ('huber', lambda p: ad.huber(ad.mul(p, 2.0), 0.5), 8),
        ('conv2d', lambda p: ad.conv2d(*_unpack(p, (5, 5, 2), (18, 3), (3,)), kernel=3), 107),
        ('bilinear-sample', _bilinear_case, 52),
    ]


def _bilinear_case(p):
    grid, x, y = _unpack(p, (4, 5, 2), (6,), (6,))
    # coordinates mapped into the interior of the 4x5 grid
    values, _ = ad.bilinear_sample(grid, ad.add(2.0, ad.mul(x, 1.7)), ad.add(1.5, ad.mul(y, 1.2)))
    return values


def _scalarize(fn, weights):
    return lambda p: ad.sum_(ad.mul(fn(p), weights))


def _second_order(fn, size, rng):
    direction = rng.uniform(-1, 1, size)

    def grad_dot(p):
        (g,) = ad.backward(fn(p), [p], create_graph=True)
        return ad.sum_(ad.mul(g, direction))
    return grad_dot


def primitive_errors(seed):
    """
    First- and second-order finite-difference errors of every operation at
    a random point in [-1, 1].

    Returns
    -------
    list of (name, error)
    """
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, size in _primitive_cases(rng):
        point = rng.uniform(-1, 1, size)
        shape = fn(ad.constant(point)).shape
        scalar = _scalarize(fn, rng.uniform(-1, 1, shape))
        out.append((name, ad.check_gradient(scalar, point)))
        out.append((f'{name}:second-order', ad.check_gradient(_second_order(scalar, size, rng), point)))
    return out


def tiny_problem(seed):
    """
    An 8x8 two-source scene with a small network for composite checks.
    """
    sample = generate_scene(TINY_SCENE, seed)
    params = init_params(TINY_ARCH, seed)
    return sample, params


def inverse_warp_error(seed):
    sample, _ = tiny_problem(seed)
    rng = np.random.default_rng(seed)
    depth = np.where(sample.valid > 0, sample.gt_depth, 4.0) * rng.uniform(0.95, 1.05, sample.gt_depth.shape)
    weights = rng.uniform(-1, 1, sample.reference.image.shape)
    ref_cam = sample.reference.camera
    src = sample.views[1]

    def fn(d):
        warped, _ = inverse_warp(src, ref_cam, d)
        return ad.sum_(ad.mul(warped, weights))
    return ad.check_gradient(fn, depth)


def primary_composition_error(seed):
    sample, params = tiny_problem(seed)
    views = sample.views[:TINY_SCENE.n_views]

    def fn(theta):
        pred = forward(params.with_theta(theta), views, sample.hyps)
        return primary_loss(pred, sample.gt_depth, sample.valid)
    return ad.check_gradient(fn, params.values)


def photometric_composition_error(seed):
    sample, params = tiny_problem(seed)

    def fn(theta):
        return photometric_loss(params.with_theta(theta), sample.views, sample.hyps,
                                TINY_PHOTO, TINY_SCENE.n_views)
    return ad.check_gradient(fn, params.values)


def quadratic_meta_error(seed, size=6, alpha=0.1):
    """
    Tape meta-gradient of outer(theta - alpha * grad inner(theta)) against the
    closed form (I - alpha A)(theta - alpha A theta - c) for inner
    1/2 theta' A theta and outer 1/2 |theta - c|^2.
    """
    rng = np.random.default_rng(seed)
    root = rng.uniform(-1, 1, (size, size))
    A = root @ root.T + np.eye(size)
    c = rng.uniform(-1, 1, size)
    theta = rng.uniform(-1, 1, size)

    def inner(t):
        return ad.mul(ad.sum_(ad.mul(t, ad.matmul(A, ad.reshape(t, (size, 1)))[:, 0])), 0.5)

    def outer(t):
        return ad.mul(ad.sum_(ad.square(ad.sub(t, c))), 0.5)

    grad, _, _ = meta_gradient(theta, inner, outer, alpha, 1, second_order=True)
    phi = theta - alpha * A @ theta
    expected = (np.eye(size) - alpha * A) @ (phi - c)
    return float(np.max(np.abs(grad - expected) / np.maximum(1.0, np.abs(expected))))


def meta_composition_error(seed, alpha=0.01):
    """
    Second-order meta-gradient of the primary loss after one photometric
    step, against finite differences of the composed objective.
    """
    sample, params = tiny_problem(seed)
    views = sample.views[:TINY_SCENE.n_views]

    def inner(theta):
        return photometric_loss(params.with_theta(theta), sample.views, sample.hyps,
                                TINY_PHOTO, TINY_SCENE.n_views)

    def outer(theta):
        pred = forward(params.with_theta(theta), views, sample.hyps)
        return primary_loss(pred, sample.gt_depth, sample.valid)

    def composed(theta):
        phi, _ = gradient_steps(theta, inner, alpha, 1, record=True)
        return outer(phi)
    return ad.check_gradient(composed, params.values)


def run_suite(seeds=range(100), composite_seeds=range(2), progress=False):
    """
    Runs every gradient check.

    Parameters
    ----------
    seeds : iterable of int
        Seeds of the randomized per-operation checks.
    composite_seeds : iterable of int
        Seeds of the scene-level checks.

    Returns
    -------
    pd.DataFrame
        Columns check, seed, max_error, tolerance, passed.
    """
    rows = []

    def add(name, seed, error, tol):
        rows.append({'check': name, 'seed': int(seed), 'max_error': float(error),
                     'tolerance': tol, 'passed': bool(error < tol)})

    for seed in track(list(seeds), description='Primitive checks', disable=not progress):
        for name, error in primitive_errors(seed):
            add(name, seed, error, PRIMITIVE_TOL)
        add('meta-quadratic', seed, quadratic_meta_error(seed), CLOSED_FORM_TOL)
    for seed in track(list(composite_seeds), description='Composite checks', disable=not progress):
        add('inverse-warp', seed, inverse_warp_error(seed), COMPOSITE_TOL)
        add('forward+primary', seed, primary_composition_error(seed), COMPOSITE_TOL)
        add('photometric', seed, photometric_composition_error(seed), COMPOSITE_TOL)
        add('meta-gradient', seed, meta_composition_error(seed), META_FD_TOL)
    report = pd.DataFrame(rows, columns=['check', 'seed', 'max_error', 'tolerance', 'passed'])
    failed = int((~report['passed']).sum())
    logger.info('Gradient checks: %d run, %d failed.', len(report), failed)
    return report
