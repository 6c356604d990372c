# Command-line entry point

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import matplotlib
import matplotlib.pyplot as plt
import pandas as pd

from mvsadapt import fileio
from mvsadapt.config import load_config, save_config
from mvsadapt.evaluation import (k_sweep, pooled_metrics, predict, run_ablation,
                                 step_sweep)
from mvsadapt.figures import plot_step_curve
from mvsadapt.gradcheck import run_suite
from mvsadapt.models import MetaAuxiliaryLearner, SupervisedPretrainer
from mvsadapt.mvsnet import ModelParams, init_params
from mvsadapt.scenegen import LAYOUTS, generate_dataset, read_scene, write_scene
from mvsadapt.utils import setup_logging

logger = logging.getLogger(__name__)

CSV_FORMAT = '%.10g'


def _int_list(text):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}') from None


def build_parser():
    parser = argparse.ArgumentParser(
        prog='mvsadapt',
        description='Plane-sweep MVS with meta-auxiliary training and test-time adaptation.')
    parser.add_argument('--seed', type=int, default=None, help='dataset seed')
    parser.add_argument('--config', default=None, help='YAML configuration file')
    parser.add_argument('--out', default='runs', help='output directory')
    parser.add_argument('-v', '--verbose', default=False, action='store_true')
    parser.add_argument('--n-jobs', type=int, default=None, help='joblib workers')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-scenes', help='render synthetic scenes to disk')
    gen.add_argument('--count', type=int, default=None)
    gen.add_argument('--split', choices=('train', 'test'), default='train')
    gen.add_argument('--layout', choices=LAYOUTS, default=None)
    gen.add_argument('--height', type=int, default=None)
    gen.add_argument('--width', type=int, default=None)
    gen.add_argument('--hypotheses', type=int, default=None)
    gen.add_argument('--brightness-jitter', type=float, default=None)
    gen.add_argument('--checker', default=None, action='store_true')

    pre = sub.add_parser('pretrain', help='supervised pretraining')
    pre.add_argument('--scenes', default=None, help='directory of training scenes')
    pre.add_argument('--epochs', type=int, default=None)
    pre.add_argument('--lr', type=float, default=None)

    meta = sub.add_parser('meta-train', help='meta-auxiliary training')
    meta.add_argument('--scenes', default=None, help='directory of training scenes')
    meta.add_argument('--checkpoint', default=None, help='pretrained checkpoint')
    meta.add_argument('--iterations', type=int, default=None)
    meta.add_argument('--first-order', default=False, action='store_true')

    ev = sub.add_parser('adapt-eval', help='evaluate with or without test-time adaptation')
    ev.add_argument('--scenes', default=None, help='directory of labeled test scenes')
    ev.add_argument('--checkpoint', default=None, help='model checkpoint')
    ev.add_argument('--no-adapt', default=False, action='store_true')

    abl = sub.add_parser('ablation', help='four-setting ablation')
    abl.add_argument('--seeds', type=_int_list, default=None)
    abl.add_argument('--test-layout', choices=LAYOUTS, default=None)
    abl.add_argument('--test-brightness-jitter', type=float, default=None)

    steps = sub.add_parser('step-sweep', help='metrics against test-time steps')
    steps.add_argument('--seeds', type=_int_list, default=None)
    steps.add_argument('--steps', type=_int_list, default=[0, 1, 2, 4, 8, 16])

    ks = sub.add_parser('k-sweep', help='metrics against the top-k view count')
    ks.add_argument('--seeds', type=_int_list, default=None)
    ks.add_argument('--ks', type=_int_list, default=[1, 2, 3, 4])

    grad = sub.add_parser('gradcheck', help='finite-difference gradient checks')
    grad.add_argument('--seeds', type=int, default=100, help='number of randomized seeds')
    grad.add_argument('--composite-seeds', type=int, default=2)

    for p in (pre, meta, ev, abl, steps, ks):
        p.add_argument('--alpha', type=float, default=None)
        p.add_argument('--beta', type=float, default=None)
        p.add_argument('--tta-steps', type=int, default=None)
        p.add_argument('--top-k', type=int, default=None)
        p.add_argument('--train-scenes', type=int, default=None)
        p.add_argument('--test-scenes', type=int, default=None)
    return parser


def _overrides(args):
    get = lambda name: getattr(args, name, None)
    return {
        'scene': {'seed': args.seed, 'layout': get('layout'), 'height': get('height'),
                  'width': get('width'), 'hypotheses': get('hypotheses'),
                  'brightness_jitter': get('brightness_jitter'), 'checker': get('checker')},
        'pretrain': {'epochs': get('epochs'), 'lr': get('lr')},
        'meta': {'alpha': get('alpha'), 'beta': get('beta'), 'tta_steps': get('tta_steps'),
                 'meta_iterations': get('iterations'), 'n_jobs': args.n_jobs,
                 'second_order': False if get('first_order') else None,
                 'photo': {'top_k': get('top_k')}},
        'train_scenes': get('train_scenes'),
        'test_scenes': get('test_scenes'),
    }


def _load_scenes(path):
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f'Scene directory not found: {path}')
    scenes = [read_scene(p) for p in sorted(path.iterdir()) if p.is_dir() and not p.name.startswith('.')]
    if not scenes:
        raise FileNotFoundError(f'No scene directories under {path}')
    logger.info('Loaded %d scene(s) from %s.', len(scenes), path)
    return scenes


def _dataset(args, experiment, split):
    if getattr(args, 'scenes', None):
        return _load_scenes(args.scenes)
    count = experiment.train_scenes if split == 'train' else experiment.test_scenes
    return generate_dataset(experiment.scene, count, split)


def _load_params(args, experiment):
    if getattr(args, 'checkpoint', None):
        path = Path(args.checkpoint)
        if not path.is_file():
            raise FileNotFoundError(f'Checkpoint not found: {path}')
        params = ModelParams.load(path)
        if params.arch != experiment.arch:
            logger.warning('Checkpoint architecture %s differs from the configured one.', params.arch)
        return params
    return init_params(experiment.arch, experiment.scene.seed)


def _write_depths(out, samples, preds=None):
    """
    Writes ground-truth and predicted depth maps as PFM plus 8-bit PPM
    visualisations, one pair per sample; without ``preds`` only the
    ground truth.
    """
    depth_dir = out / 'depth'
    depth_dir.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        hyps = sample.hyps
        if preds is not None:
            fileio.write_pfm(depth_dir / f'{i:03d}_pred.pfm', preds[i])
            fileio.write_depth_visualization(depth_dir / f'{i:03d}_pred.ppm', preds[i],
                                             hyps.d_min, hyps.d_max)
        if sample.gt_depth is not None:
            fileio.write_pfm(depth_dir / f'{i:03d}_ref.pfm', sample.gt_depth)
            fileio.write_depth_visualization(depth_dir / f'{i:03d}_ref.ppm', sample.gt_depth,
                                             hyps.d_min, hyps.d_max, sample.valid)


def _report_training(out, params, samples, experiment):
    labeled = [s for s in samples if s.gt_depth is not None]
    if not labeled:
        return
    preds = predict(params, labeled, experiment.meta, adapt=False)
    report = pooled_metrics(preds, labeled, experiment.to_dict())
    report.to_frame().to_csv(out / 'metrics.csv', index=False, float_format=CSV_FORMAT)
    _write_depths(out, labeled, preds)


def cmd_gen_scenes(args, experiment, out):
    count = args.count if args.count is not None else (
        experiment.train_scenes if args.split == 'train' else experiment.test_scenes)
    samples = generate_dataset(experiment.scene, count, args.split)
    for i, sample in enumerate(samples):
        write_scene(out / 'scenes' / f'{args.split}_{i:03d}', sample, experiment.scene)
    rows = [{'scene': f'{args.split}_{i:03d}', 'scene_seed': s.scene_seed, 'layout': s.layout,
             'valid_fraction': float(s.valid.mean()),
             'depth_min': float(s.gt_depth[s.valid > 0].min()),
             'depth_max': float(s.gt_depth[s.valid > 0].max())} for i, s in enumerate(samples)]
    pd.DataFrame(rows).to_csv(out / 'scenes.csv', index=False, float_format=CSV_FORMAT)
    _write_depths(out, samples)
    logger.info('Wrote %d %s scene(s) to %s.', len(samples), args.split, out / 'scenes')
    return 0


def cmd_pretrain(args, experiment, out):
    train = _dataset(args, experiment, 'train')
    model = SupervisedPretrainer(params=init_params(experiment.arch, experiment.scene.seed),
                                 n_views=experiment.meta.n_views)
    result = model.fit(dataset=train, config=experiment.pretrain, n_jobs=experiment.meta.n_jobs,
                       progress=True).get_results()
    result.save_to_csv(out / 'pretrain_trace.csv')
    result.params.save(out / 'pretrained.ckpt')
    _report_training(out, result.params, train, experiment)
    return 0


def cmd_meta_train(args, experiment, out):
    train = _dataset(args, experiment, 'train')
    params = _load_params(args, experiment)
    if not args.checkpoint:
        logger.info('No checkpoint given; pretraining first.')
        params = SupervisedPretrainer(params=params, n_views=experiment.meta.n_views).fit(
            dataset=train, config=experiment.pretrain, n_jobs=experiment.meta.n_jobs,
            progress=True).get_results().params
        params.save(out / 'pretrained.ckpt')
    result = MetaAuxiliaryLearner(params=params).fit(dataset=train, config=experiment.meta,
                                                     progress=True).get_results()
    result.save_to_csv(out / 'meta_trace.csv')
    result.params.save(out / 'meta.ckpt')
    _report_training(out, result.params, train, experiment)
    return 0


def cmd_adapt_eval(args, experiment, out):
    test = _dataset(args, experiment, 'test')
    if any(s.gt_depth is None for s in test):
        raise ValueError('Evaluation needs ground-truth depth for every scene.')
    params = _load_params(args, experiment)
    adapt = not args.no_adapt and experiment.meta.tta_steps > 0
    preds = predict(params, test, experiment.meta, adapt=adapt)
    echo = experiment.to_dict()
    echo['adapt'] = adapt
    report = pooled_metrics(preds, test, echo)
    frame = report.to_frame()
    frame.insert(0, 'tta_steps', experiment.meta.tta_steps if adapt else 0)
    frame.to_csv(out / 'metrics.csv', index=False, float_format=CSV_FORMAT)
    _write_depths(out, test, preds)
    logger.info('rel %.4f, tau(1.03) %.2f, tau(1.10) %.2f over %d pixels.',
                report.rel, report.tau_103, report.tau_110, report.pixel_count)
    return 0


def _seeds(args, experiment):
    return args.seeds if args.seeds else [experiment.scene.seed]


def cmd_ablation(args, experiment, out):
    test_scene = None
    if args.test_layout is not None or args.test_brightness_jitter is not None:
        changes = {'layout': args.test_layout,
                   'brightness_jitter': args.test_brightness_jitter}
        test_scene = replace(experiment.scene, **{k: v for k, v in changes.items() if v is not None})
    table, test, preds = run_ablation(_seeds(args, experiment), experiment, test_scene,
                                      progress=True, return_predictions=True)
    table.to_csv(out / 'ablation.csv', index=False, float_format=CSV_FORMAT)
    _write_depths(out, test, preds)
    logger.info('Ablation:\n%s', table.to_string(index=False))
    return 0


def cmd_step_sweep(args, experiment, out):
    curve, test, preds = step_sweep(_seeds(args, experiment), experiment, args.steps,
                                    progress=True, return_predictions=True)
    curve.to_csv(out / 'step_curve.csv', index=False, float_format=CSV_FORMAT)
    _write_depths(out, test, preds)
    fig, ax = plt.subplots(figsize=(6, 4))
    plot_step_curve(curve, ax=ax)
    fig.savefig(out / 'step_curve.png', bbox_inches='tight', dpi=150)
    plt.close(fig)
    return 0


def cmd_k_sweep(args, experiment, out):
    table, test, preds = k_sweep(_seeds(args, experiment), experiment, args.ks,
                                 progress=True, return_predictions=True)
    table.to_csv(out / 'k_sweep.csv', index=False, float_format=CSV_FORMAT)
    _write_depths(out, test, preds)
    return 0


def cmd_gradcheck(args, experiment, out):
    report = run_suite(range(args.seeds), range(args.composite_seeds), progress=True)
    report.to_csv(out / 'gradcheck.csv', index=False, float_format=CSV_FORMAT)
    failed = report[~report['passed']]
    if len(failed):
        for _, row in failed.iterrows():
            logger.error('Gradient check %s (seed %d) failed: %.3g >= %.3g.',
                         row['check'], row['seed'], row['max_error'], row['tolerance'])
        return 1
    return 0


COMMANDS = {
    'gen-scenes': cmd_gen_scenes,
    'pretrain': cmd_pretrain,
    'meta-train': cmd_meta_train,
    'adapt-eval': cmd_adapt_eval,
    'ablation': cmd_ablation,
    'step-sweep': cmd_step_sweep,
    'k-sweep': cmd_k_sweep,
    'gradcheck': cmd_gradcheck,
}


def main(argv=None):
    """
    Runs one subcommand; returns the process exit status.
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    matplotlib.use('Agg')
    try:
        experiment = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_config(experiment, out / 'config.yaml')
        return COMMANDS[args.command](args, experiment, out)
    except (ValueError, FileNotFoundError) as e:
        print(f'mvsadapt: error: {e}', file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
