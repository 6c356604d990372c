# Module containing meta-auxiliary training and test-time adaptation

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from rich.progress import track

from mvsadapt import autodiff as ad
from mvsadapt.geometry import DepthHypotheses
from mvsadapt.mvsnet import ModelParams, forward, primary_loss
from mvsadapt.photoloss import PhotoLossConfig, photometric_loss

logger = logging.getLogger(__name__)

OUTER_OPTIMIZERS = ('sgd', 'adam')


@dataclass(frozen=True)
class MetaConfig:
    """
    Settings of meta-auxiliary training and test-time adaptation.

    Parameters
    ----------
    alpha : float
        Inner (and test-time) learning rate.
    beta : float
        Meta learning rate.
    inner_steps : int
        Photometric steps simulated per sample during meta-training.
    tta_steps : int
        Photometric steps taken per test sample.
    meta_batch : int
        Samples per meta-iteration.
    n_views : int
        Views used by the depth prediction (reference included).
    m_views : int
        Source views used by the photometric loss.
    second_order : bool
        Differentiate through the inner updates; False treats the adapted
        parameters as constants of theta.
    meta_iterations : int
    seed : int
        Seed of the meta-batch sampling.
    outer_optimizer : str
        'sgd' (plain meta-gradient step) or 'adam'.
    photo : PhotoLossConfig
    n_jobs : int
        joblib workers for per-sample work.
    """
    alpha: float = 1e-4
    beta: float = 1e-4
    inner_steps: int = 1
    tta_steps: int = 2
    meta_batch: int = 2
    n_views: int = 3
    m_views: int = 4
    second_order: bool = True
    meta_iterations: int = 200
    seed: int = 0
    outer_optimizer: str = 'sgd'
    photo: PhotoLossConfig = field(default_factory=PhotoLossConfig)
    n_jobs: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"'alpha' and 'beta' must be nonnegative, got {self.alpha}, {self.beta}.")
        for name in ('inner_steps', 'tta_steps', 'meta_iterations'):
            if getattr(self, name) < 0:
                raise ValueError(f"'{name}' must be nonnegative, got {getattr(self, name)}.")
        if self.meta_batch < 1:
            raise ValueError(f"'meta_batch' must be at least 1, got {self.meta_batch}.")
        if self.n_views < 2:
            raise ValueError(f"'n_views' must be at least 2, got {self.n_views}.")
        if self.m_views <= self.n_views - 1:
            raise ValueError(f"'m_views' ({self.m_views}) must exceed n_views - 1 ({self.n_views - 1}).")
        if self.photo.top_k > self.m_views:
            raise ValueError(f"'top_k' ({self.photo.top_k}) must not exceed 'm_views' ({self.m_views}).")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise ValueError(f"'outer_optimizer' must be one of {OUTER_OPTIMIZERS}, got {self.outer_optimizer!r}.")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class PretrainConfig:
    """
    Supervised pretraining settings; ``batch_size`` None means full batch.
    """
    epochs: int = 200
    lr: float = 0.02
    batch_size: int = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"'epochs' must be nonnegative, got {self.epochs}.")
        if self.lr < 0:
            raise ValueError(f"'lr' must be nonnegative, got {self.lr}.")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"'batch_size' must be positive, got {self.batch_size}.")


@dataclass(frozen=True, eq=False)
class SceneSample:
    """
    One MVS task: the reference view followed by its source views, the
    reference ground truth (None for unlabeled test data) and its mask.
    """
    views: tuple
    hyps: DepthHypotheses
    gt_depth: np.ndarray = None
    valid: np.ndarray = None
    scene_seed: int = None
    layout: str = None

    def __post_init__(self):
        object.__setattr__(self, 'views', tuple(self.views))
        if len(self.views) < 2:
            raise ValueError(f'A sample needs at least 2 views, got {len(self.views)}.')
        shape = self.views[0].shape
        if any(v.shape != shape for v in self.views):
            raise ValueError(f'All views must share the reference size {shape}, got '
                             f'{[v.shape for v in self.views]}.')
        if self.gt_depth is None:
            return
        gt = np.array(self.gt_depth, dtype=np.float64)
        valid = np.ones(shape) if self.valid is None else np.array(self.valid, dtype=np.float64)
        if gt.shape != shape or valid.shape != shape:
            raise ValueError(f'Ground truth {gt.shape} and mask {valid.shape} must match the image {shape}.')
        inside = gt[valid > 0]
        if inside.size and (inside.min() < self.hyps.d_min - 1e-9 or inside.max() > self.hyps.d_max + 1e-9):
            raise ValueError('Valid ground-truth depths must lie within the hypothesis range.')
        object.__setattr__(self, 'gt_depth', gt)
        object.__setattr__(self, 'valid', valid)

    @property
    def reference(self):
        return self.views[0]

    @property
    def m_views(self):
        return len(self.views) - 1

    def check_views(self, n_views, m_views=None):
        """
        Raises ValueError unless the sample holds at least ``n_views`` views
        and, when ``m_views`` is given, exactly ``m_views`` source views.
        """
        if n_views > len(self.views):
            raise ValueError(f'n_views={n_views} exceeds the {len(self.views)} views of the sample.')
        if m_views is not None and self.m_views != m_views:
            raise ValueError(f'Expected {m_views} source views, the sample has {self.m_views}.')

    def unlabeled(self):
        return SceneSample(self.views, self.hyps, scene_seed=self.scene_seed, layout=self.layout)


def gradient_steps(theta, loss_fn, alpha, steps, record=False):
    """
    ``steps`` plain gradient-descent updates phi <- phi - alpha * grad.

    Parameters
    ----------
    theta : np.ndarray or Var
        Starting point. With ``record`` it must be a Var on a tape and the
        whole update chain is recorded on that tape.
    loss_fn : callable
        Maps a Var to a scalar Var.
    alpha : float
    steps : int
    record : bool, optional
        Record the updates so a later backward differentiates through them.

    Returns
    -------
    phi : np.ndarray or Var
        Adapted point (a Var when recording).
    losses : list of float
        Loss before each update.
    """
    if steps < 0:
        raise ValueError(f"'steps' must be nonnegative, got {steps}.")
    losses = []
    if record:
        if not isinstance(theta, ad.Var) or theta.tape is None:
            raise ValueError('Recorded steps need a Var on a tape.')
        phi = theta
        for i in range(steps):
            try:
                loss = loss_fn(phi)
                (grad,) = ad.backward(loss, [phi], create_graph=True)
            except FloatingPointError as e:
                raise FloatingPointError(f'Non-finite value at inner step {i}: {e}') from e
            losses.append(float(loss.value))
            phi = ad.sub(phi, ad.mul(grad, alpha))
        return phi, losses

    phi = np.array(theta.value if isinstance(theta, ad.Var) else theta, dtype=np.float64)
    for i in range(steps):
        leaf = ad.Tape().leaf(phi)
        try:
            loss = loss_fn(leaf)
            (grad,) = ad.backward(loss, [leaf])
        except FloatingPointError as e:
            raise FloatingPointError(f'Non-finite value at inner step {i}: {e}') from e
        if not np.isfinite(grad.value).all():
            raise FloatingPointError(f'Non-finite gradient at inner step {i}.')
        losses.append(float(loss.value))
        phi = phi - alpha * grad.value
    return phi, losses


def meta_gradient(theta, inner_loss, outer_loss, alpha, steps, second_order=True):
    """
    Gradient with respect to theta of outer_loss(phi(theta)), where phi(theta)
    takes ``steps`` gradient steps on ``inner_loss`` from theta.

    With ``second_order`` False, phi is treated as a constant and the outer
    gradient is taken at phi.

    Returns
    -------
    grad : np.ndarray
    inner : float
        Inner loss at theta (nan when ``steps`` is 0).
    outer : float
        Outer loss at phi.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if second_order:
        tape = ad.Tape()
        leaf = tape.leaf(theta)
        phi, losses = gradient_steps(leaf, inner_loss, alpha, steps, record=True)
        outer = outer_loss(phi)
        (grad,) = ad.backward(outer, [leaf])
    else:
        phi, losses = gradient_steps(theta, inner_loss, alpha, steps, record=False)
        leaf = ad.Tape().leaf(phi)
        outer = outer_loss(leaf)
        (grad,) = ad.backward(outer, [leaf])
    inner = losses[0] if losses else float('nan')
    return grad.value, inner, float(outer.value)


def _photo_objective(params, sample, photo, n_views):
    def loss_fn(theta):
        return photometric_loss(params.with_theta(theta), sample.views, sample.hyps, photo, n_views)
    return loss_fn


def _primary_objective(params, sample, n_views):
    if sample.gt_depth is None:
        raise ValueError('The primary loss needs a labeled sample.')

    def loss_fn(theta):
        pred = forward(params.with_theta(theta), sample.views[:n_views], sample.hyps)
        return primary_loss(pred, sample.gt_depth, sample.valid)
    return loss_fn


def inner_adapt(params, sample, alpha, steps, record=False, photo=None, n_views=3):
    """
    Adapts ``params`` to one sample with ``steps`` photometric gradient steps
    over all of its views.

    With ``record`` the parameters must hold a Var on a tape; the result then
    stays differentiable with respect to it.
    """
    photo = PhotoLossConfig() if photo is None else photo
    sample.check_views(n_views)
    theta, _ = gradient_steps(params.theta, _photo_objective(params, sample, photo, n_views),
                              alpha, steps, record=record)
    return params.with_theta(theta)


def _sample_meta_gradient(theta, arch_params, sample, cfg):
    sample.check_views(cfg.n_views, cfg.m_views)
    return meta_gradient(theta,
                         _photo_objective(arch_params, sample, cfg.photo, cfg.n_views),
                         _primary_objective(arch_params, sample, cfg.n_views),
                         cfg.alpha, cfg.inner_steps, cfg.second_order)


def batch_meta_gradient(params, batch, cfg):
    """
    Meta-gradient summed over ``batch`` in batch order.

    Returns
    -------
    grad : np.ndarray
    inner : float
        Mean inner photometric loss at theta.
    outer : float
        Mean primary loss after adaptation.
    """
    if len(batch) < 1:
        raise ValueError('The meta-batch is empty.')
    theta = params.values
    results = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_sample_meta_gradient)(theta, params, sample, cfg) for sample in batch)
    grad = np.zeros_like(theta)
    for g, _, _ in results:
        grad = grad + g
    inner = float(np.mean([r[1] for r in results]))
    outer = float(np.mean([r[2] for r in results]))
    return grad, inner, outer


def meta_step(params, batch, cfg):
    """
    One plain meta-update theta - beta * sum_b grad L_pri(phi_b(theta)).
    """
    grad, _, _ = batch_meta_gradient(params, batch, cfg)
    return params.with_theta(params.values - cfg.beta * grad)


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def meta_train(params, dataset, cfg, progress=False):
    """
    Meta-auxiliary training.

    Each iteration samples ``cfg.meta_batch`` scenes with a generator seeded
    by ``cfg.seed`` and applies the outer update.

    Returns
    -------
    params : ModelParams
        Meta-trained parameters.
    trace : pd.DataFrame
        Columns iteration, inner_loss, outer_loss, grad_norm.
    """
    if not dataset:
        raise ValueError('The training dataset is empty.')
    for sample in dataset:
        sample.check_views(cfg.n_views, cfg.m_views)
    rng = np.random.default_rng(cfg.seed)
    theta = params.values.copy()
    adam = _Adam(cfg.beta) if cfg.outer_optimizer == 'adam' else None
    rows = []
    replace_draws = len(dataset) < cfg.meta_batch
    for it in track(range(cfg.meta_iterations), description='Meta-training',
                    disable=not progress):
        picks = rng.choice(len(dataset), size=cfg.meta_batch, replace=replace_draws)
        batch = [dataset[i] for i in picks]
        grad, inner, outer = batch_meta_gradient(params.with_theta(theta), batch, cfg)
        theta = adam.step(theta, grad) if adam else theta - cfg.beta * grad
        rows.append({'iteration': it + 1, 'inner_loss': inner, 'outer_loss': outer,
                     'grad_norm': float(np.linalg.norm(grad))})
        logger.debug('Meta-iteration %d: inner %.6g, outer %.6g', it + 1, inner, outer)
    trace = pd.DataFrame(rows, columns=['iteration', 'inner_loss', 'outer_loss', 'grad_norm'])
    if rows:
        logger.info('Meta-training finished after %d iterations, final outer loss %.6g.',
                    len(rows), rows[-1]['outer_loss'])
    return params.with_theta(theta), trace


def _sample_primary_gradient(theta, params, sample, n_views):
    leaf = ad.Tape().leaf(theta)
    loss = _primary_objective(params, sample, n_views)(leaf)
    (grad,) = ad.backward(loss, [leaf])
    return grad.value, float(loss.value)


def pretrain(params, dataset, epochs, lr, seed=0, n_views=3, batch_size=None, n_jobs=1,
             progress=False):
    """
    Supervised pretraining by plain gradient descent on the mean primary loss.

    Parameters
    ----------
    params : ModelParams
    dataset : list of SceneSample
        Labeled samples; the reference and its first ``n_views - 1`` sources
        feed the network.
    epochs : int
    lr : float
    seed : int, optional
        Seeds the minibatch order when ``batch_size`` is set.
    n_views : int, optional
    batch_size : int, optional
        Samples per update, None for the full dataset.
    n_jobs : int, optional
        joblib workers.

    Returns
    -------
    params : ModelParams
    trace : pd.DataFrame
        Columns epoch, loss (mean loss over the epoch's updates, evaluated
        before each update).
    """
    if not dataset:
        raise ValueError('The training dataset is empty.')
    for sample in dataset:
        sample.check_views(n_views)
    rng = np.random.default_rng(seed)
    theta = params.values.copy()
    size = len(dataset) if batch_size is None else min(batch_size, len(dataset))
    rows = []
    for epoch in track(range(epochs), description='Pretraining', disable=not progress):
        order = np.arange(len(dataset)) if batch_size is None else rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), size):
            batch = [dataset[i] for i in order[start:start + size]]
            try:
                results = Parallel(n_jobs=n_jobs)(
                    delayed(_sample_primary_gradient)(theta, params, s, n_views) for s in batch)
            except FloatingPointError as e:
                raise FloatingPointError(f'Pretraining diverged at epoch {epoch + 1}: {e}') from e
            grad = np.zeros_like(theta)
            for g, _ in results:
                grad = grad + g
            loss = float(np.mean([r[1] for r in results]))
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                raise FloatingPointError(f'Pretraining diverged at epoch {epoch + 1}.')
            losses.append(loss)
            theta = theta - lr * grad / len(batch)
        rows.append({'epoch': epoch + 1, 'loss': float(np.mean(losses))})
        logger.debug('Epoch %d: primary loss %.6g', epoch + 1, rows[-1]['loss'])
    if rows:
        logger.info('Pretraining finished after %d epochs, final loss %.6g.', epochs, rows[-1]['loss'])
    return params.with_theta(theta), pd.DataFrame(rows, columns=['epoch', 'loss'])


def test_time_adapt(params, sample, cfg):
    """
    Per-sample adaptation: ``cfg.tta_steps`` photometric steps from
    ``params``, the same update rule as ``inner_adapt`` without recording.
    Ground truth is never read.
    """
    sample.check_views(cfg.n_views, cfg.m_views)
    return inner_adapt(ModelParams(params.values, params.arch), sample, cfg.alpha, cfg.tta_steps,
                       record=False, photo=cfg.photo, n_views=cfg.n_views)
