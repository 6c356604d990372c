import os
from dataclasses import replace

import matplotlib.pyplot as plt

from mvsadapt.config import load_config
from mvsadapt.evaluation import evaluate, predict, step_sweep
from mvsadapt.figures import plot_depth_panel, plot_step_curve
from mvsadapt.models import MetaAuxiliaryLearner, SupervisedPretrainer
from mvsadapt.mvsnet import init_params
from mvsadapt.scenegen import generate_dataset
from mvsadapt.utils import setup_logging


def fronto_example():
    experiment = load_config(os.path.join('configs', 'default.yaml'))
    train = generate_dataset(experiment.scene, experiment.train_scenes, 'train')
    test = generate_dataset(experiment.scene, experiment.test_scenes, 'test')

    pretrainer = SupervisedPretrainer(params=init_params(experiment.arch, 0),
                                      n_views=experiment.meta.n_views)
    pretrainer.fit(dataset=train, config=experiment.pretrain)
    baseline = pretrainer.get_results()
    baseline.summary()

    learner = MetaAuxiliaryLearner(params=baseline.params)
    learner.fit(dataset=train, config=experiment.meta)
    meta_results = learner.get_results()
    meta_results.summary()

    for name, params, adapt in (('baseline', baseline.params, False),
                                ('meta+tta', meta_results.params, True)):
        report = evaluate(params, test, experiment.meta, adapt=adapt)
        print(f'{name}: rel {report.rel:.3f}, tau(1.03) {report.tau_103:.2f}, '
              f'tau(1.10) {report.tau_110:.2f}')

    os.makedirs(os.path.join('figures', 'fronto_example'), exist_ok=True)
    meta_results.plot()
    plt.savefig(os.path.join('figures', 'fronto_example', 'meta_trace.png'))

    sample = test[0]
    pred = predict(meta_results.params, [sample], experiment.meta)[0]
    plot_depth_panel(sample.reference.image, sample.gt_depth, pred, sample.valid,
                     experiment.scene.d_min, experiment.scene.d_max)
    plt.savefig(os.path.join('figures', 'fronto_example', 'depth_panel.png'))


def step_curve_example():
    experiment = load_config(os.path.join('configs', 'default.yaml'))
    experiment = replace(experiment, meta=experiment.meta.replace(meta_iterations=50))
    curve = step_sweep([0, 1, 2], experiment, [0, 1, 2, 4, 8, 16], progress=True)
    print(curve.to_string(index=False))

    fig, ax = plt.subplots(figsize=(6, 4))
    plot_step_curve(curve, ax=ax)
    os.makedirs(os.path.join('figures', 'step_curve'), exist_ok=True)
    plt.savefig(os.path.join('figures', 'step_curve', 'step_curve.png'))


if __name__ == "__main__":
    setup_logging()
    fronto_example()
    step_curve_example()
