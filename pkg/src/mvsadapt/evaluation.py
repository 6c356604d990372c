# Module containing depth metrics and the experiment harnesses

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from rich.progress import track

from mvsadapt.metatta import meta_train, pretrain, test_time_adapt
from mvsadapt.mvsnet import forward, init_params
from mvsadapt.scenegen import generate_dataset
from mvsadapt.utils import decorator_timer, mean_std

logger = logging.getLogger(__name__)

ABLATION_SETTINGS = ('baseline', 'baseline+tta', 'meta', 'meta+tta')
ABLATION_COLUMNS = ['setting', 'rel_mean', 'rel_std', 'tau103_mean', 'tau103_std',
                    'tau110_mean', 'tau110_std']
POOLING = 'pixel'


@dataclass
class MetricsReport:
    """
    Depth metrics of one evaluation run, pooled over all valid pixels of all
    samples.

    Attributes
    ----------
    rel : float
        Mean absolute relative error, percent.
    tau_103, tau_110 : float
        Inlier percentages at ratio thresholds 1.03 and 1.10.
    pixel_count : int
    config_echo : dict
        Resolved configuration of the run.
    """
    rel: float
    tau_103: float
    tau_110: float
    pixel_count: int
    config_echo: dict = field(default_factory=dict)

    def to_frame(self):
        return pd.DataFrame([{'pooling': POOLING, 'rel': self.rel, 'tau103': self.tau_103,
                              'tau110': self.tau_110, 'pixel_count': self.pixel_count}])


def _valid_pixels(pred, gt, valid):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    mask = np.asarray(valid) > 0
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f'Shapes differ: pred {pred.shape}, gt {gt.shape}, valid {mask.shape}.')
    if not mask.any():
        raise ValueError('The valid mask is empty.')
    pred, gt = pred[mask], gt[mask]
    if np.any(gt <= 0):
        raise ValueError('Ground truth must be positive on valid pixels.')
    return pred, gt


def rel_error(pred, gt, valid):
    """
    100 * mean over valid pixels of |pred - gt| / gt.
    """
    pred, gt = _valid_pixels(pred, gt, valid)
    return float(100.0 * np.mean(np.abs(pred - gt) / gt))


def inlier_ratio(pred, gt, valid, t):
    """
    Percentage of valid pixels with max(pred/gt, gt/pred) < t. Nonpositive
    predictions count as outliers.
    """
    if not t > 1:
        raise ValueError(f"'t' must exceed 1, got {t}.")
    pred, gt = _valid_pixels(pred, gt, valid)
    positive = pred > 0
    safe = np.where(positive, pred, 1.0)
    ratio = np.maximum(safe / gt, gt / safe)
    return float(100.0 * np.mean(positive & (ratio < t)))


def pooled_metrics(preds, samples, config_echo=None):
    """
    Metrics over the concatenated valid pixels of all samples.
    """
    if not samples:
        raise ValueError('The test set is empty.')
    pred = np.concatenate([np.asarray(p).ravel() for p in preds])
    gt = np.concatenate([s.gt_depth.ravel() for s in samples])
    valid = np.concatenate([s.valid.ravel() for s in samples])
    return MetricsReport(rel=rel_error(pred, gt, valid),
                         tau_103=inlier_ratio(pred, gt, valid, 1.03),
                         tau_110=inlier_ratio(pred, gt, valid, 1.10),
                         pixel_count=int((valid > 0).sum()),
                         config_echo=dict(config_echo or {}))


@decorator_timer
def _predict_one(params, sample, cfg, adapt):
    sample.check_views(cfg.n_views, cfg.m_views)
    if adapt:
        params = test_time_adapt(params, sample.unlabeled(), cfg)
    return forward(params, sample.views[:cfg.n_views], sample.hyps).value


def predict(params, samples, cfg, adapt=True):
    """
    Depth predictions for ``samples``, each from ``params`` (adapted per
    sample with ``cfg.tta_steps`` steps when ``adapt``).

    Returns
    -------
    list of np.ndarray
    """
    results = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_predict_one)(params, sample, cfg, adapt) for sample in samples)
    preds = [r[0] for r in results]
    seconds = [r[1] for r in results]
    if seconds:
        logger.info('Predicted %d sample(s) %s adaptation, %.3f s per sample.',
                    len(samples), 'with' if adapt else 'without', float(np.mean(seconds)))
    return preds


def evaluate(params, samples, cfg, adapt=True, config_echo=None):
    """
    Evaluates ``params`` on labeled test ``samples``.

    Parameters
    ----------
    params : ModelParams
    samples : list of SceneSample
    cfg : MetaConfig
        Supplies the view count, TTA steps, step size and loss settings.
    adapt : bool, optional
        Run test-time adaptation per sample first.
    config_echo : dict, optional
        Stored in the report; defaults to the MetaConfig fields.

    Returns
    -------
    MetricsReport
    """
    return _evaluate(params, samples, cfg, adapt, config_echo)[0]


def _evaluate(params, samples, cfg, adapt, config_echo=None):
    if not samples:
        raise ValueError('The test set is empty.')
    echo = config_echo if config_echo is not None else {
        'meta': {k: v for k, v in vars(cfg).items() if k != 'photo'}, 'photo': vars(cfg.photo)}
    preds = predict(params, samples, cfg, adapt)
    return pooled_metrics(preds, samples, echo), preds


def prepare_seed(seed, experiment, test_scene=None, progress=False):
    """
    Generates the datasets of one dataset seed and trains the pretrained
    baseline on them.

    Returns
    -------
    pretrained : ModelParams
    train : list of SceneSample
    test : list of SceneSample
    """
    scene = replace(experiment.scene, seed=seed)
    test_scene = scene if test_scene is None else replace(test_scene, seed=seed)
    train = generate_dataset(scene, experiment.train_scenes, 'train')
    test = generate_dataset(test_scene, experiment.test_scenes, 'test')
    cfg = experiment.pretrain
    pretrained, _ = pretrain(init_params(experiment.arch, seed), train, cfg.epochs, cfg.lr,
                             seed=cfg.seed + seed, n_views=experiment.meta.n_views,
                             batch_size=cfg.batch_size, n_jobs=experiment.meta.n_jobs,
                             progress=progress)
    return pretrained, train, test


def _meta_cfg(experiment, seed, **changes):
    return experiment.meta.replace(seed=experiment.meta.seed + seed, **changes)


def _summarise(reports, label_name, label):
    row = {label_name: label}
    for key, attr in (('rel', 'rel'), ('tau103', 'tau_103'), ('tau110', 'tau_110')):
        row[f'{key}_mean'], row[f'{key}_std'] = mean_std([getattr(r, attr) for r in reports])
    return row


def run_ablation(seeds, experiment, test_scene=None, progress=False, return_predictions=False):
    """
    Four-setting ablation over dataset seeds: pretrained baseline, baseline
    with test-time adaptation, meta-trained without adaptation and the full
    meta-trained model with adaptation.

    Parameters
    ----------
    seeds : list of int
    experiment : ExperimentConfig
    test_scene : SceneSpec, optional
        Scene family of the test split when it differs from training.
    return_predictions : bool, optional
        Also return the test samples of the last seed and the full-framework
        predictions on them.

    Returns
    -------
    pd.DataFrame
        4 rows, columns setting and mean/std (ddof=0) of rel, tau103, tau110.
    test : list of SceneSample
        Only with ``return_predictions``.
    preds : list of np.ndarray
        Only with ``return_predictions``.
    """
    if not seeds:
        raise ValueError('Need at least one dataset seed.')
    reports = {name: [] for name in ABLATION_SETTINGS}
    for seed in track(seeds, description='Ablation', disable=not progress):
        pretrained, train, test = prepare_seed(seed, experiment, test_scene)
        cfg = _meta_cfg(experiment, seed)
        meta_params, _ = meta_train(pretrained, train, cfg)
        reports['baseline'].append(evaluate(pretrained, test, cfg, adapt=False))
        reports['baseline+tta'].append(evaluate(pretrained, test, cfg, adapt=True))
        reports['meta'].append(evaluate(meta_params, test, cfg, adapt=False))
        full, preds = _evaluate(meta_params, test, cfg, adapt=True)
        reports['meta+tta'].append(full)
        logger.info('Seed %d: baseline rel %.4f, full rel %.4f', seed,
                    reports['baseline'][-1].rel, full.rel)
    rows = [_summarise(reports[name], 'setting', name) for name in ABLATION_SETTINGS]
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    return (table, test, preds) if return_predictions else table


def _mean_rows(reports, label_name, labels):
    rows = [{label_name: label,
             'rel': float(np.mean([r.rel for r in reports[label]])),
             'tau103': float(np.mean([r.tau_103 for r in reports[label]])),
             'tau110': float(np.mean([r.tau_110 for r in reports[label]]))} for label in labels]
    return pd.DataFrame(rows, columns=[label_name, 'rel', 'tau103', 'tau110'])


def step_sweep(seeds, experiment, steps, progress=False, return_predictions=False):
    """
    Metrics of the meta-trained model for each number of test-time steps,
    averaged over dataset seeds.

    With ``return_predictions`` the test samples of the last seed and the
    predictions at the configured ``tta_steps`` (the largest swept value
    when it is not swept) are returned as well.

    Returns
    -------
    pd.DataFrame
        Columns steps, rel, tau103, tau110, ascending in steps.
    """
    steps = sorted(set(int(s) for s in steps))
    if not steps or steps[0] < 0:
        raise ValueError("'steps' must be a nonempty list of nonnegative integers.")
    if not seeds:
        raise ValueError('Need at least one dataset seed.')
    kept = experiment.meta.tta_steps if experiment.meta.tta_steps in steps else steps[-1]
    reports = {s: [] for s in steps}
    for seed in track(seeds, description='Step sweep', disable=not progress):
        pretrained, train, test = prepare_seed(seed, experiment)
        cfg = _meta_cfg(experiment, seed)
        meta_params, _ = meta_train(pretrained, train, cfg)
        for s in steps:
            report, step_preds = _evaluate(meta_params, test, cfg.replace(tta_steps=s), adapt=s > 0)
            reports[s].append(report)
            if s == kept:
                preds = step_preds
    table = _mean_rows(reports, 'steps', steps)
    return (table, test, preds) if return_predictions else table


def k_sweep(seeds, experiment, ks, progress=False, return_predictions=False):
    """
    Full-framework metrics for each top-k value; the meta-training and the
    adaptation both use the swept k.

    With ``return_predictions`` the test samples of the last seed and the
    predictions at the configured ``top_k`` (the last swept value when it is
    not swept) are returned as well.

    Returns
    -------
    pd.DataFrame
        Columns k, rel, tau103, tau110, one row per k.
    """
    ks = [int(k) for k in ks]
    m_views = experiment.meta.m_views
    if not ks or min(ks) < 1 or max(ks) > m_views:
        raise ValueError(f"Every k must lie in [1, {m_views}], got {ks}.")
    if not seeds:
        raise ValueError('Need at least one dataset seed.')
    kept = experiment.meta.photo.top_k if experiment.meta.photo.top_k in ks else ks[-1]
    reports = {k: [] for k in ks}
    for seed in track(seeds, description='K sweep', disable=not progress):
        pretrained, train, test = prepare_seed(seed, experiment)
        for k in ks:
            cfg = _meta_cfg(experiment, seed, photo=replace(experiment.meta.photo, top_k=k))
            meta_params, _ = meta_train(pretrained, train, cfg)
            report, k_preds = _evaluate(meta_params, test, cfg, adapt=True)
            reports[k].append(report)
            if k == kept:
                preds = k_preds
    table = _mean_rows(reports, 'k', ks)
    return (table, test, preds) if return_predictions else table
