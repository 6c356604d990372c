import logging

import matplotlib.pyplot as plt

from mvsadapt.figures import plot_trace
from mvsadapt.metatta import MetaConfig, PretrainConfig, meta_train, pretrain
from mvsadapt.mvsnet import ModelParams
from mvsadapt.prototypes import Protomodel, Protoresult
from mvsadapt.utils import decorator_timer

logger = logging.getLogger(__name__)


class TrainingResult(Protoresult):
    """
    Result class containing the output of a trainer.

    Parameters:
        params (ModelParams): Trained parameters.
        trace (pd.DataFrame): Per-epoch or per-iteration losses.
        model_name (str): Name of the trainer.
        settings (dict): Training settings used.
        seconds (float): Wall time of the fit.
    """

    def __init__(self, *, params, trace, model_name, settings, seconds):
        super().__init__()
        self.params = params
        self.trace = trace
        self.model_name = model_name
        self.settings = settings
        self.seconds = seconds

    def summary(self):
        """
        Prints the training configuration and the loss trajectory.
        """
        print('=' * 72)
        print(f'Model: {self.model_name}')
        print(f'Parameters: {self.params.arch.param_count}')
        for key, value in self.settings.items():
            print(f'{key}: {value}')
        print('-' * 72)
        print(f'Steps recorded: {len(self.trace)}')
        for column in [c for c in self.trace.columns if c.endswith('loss')]:
            if len(self.trace):
                first, last = self.trace[column].iloc[0], self.trace[column].iloc[-1]
                print(f'{column}: first {first:.6g}, last {last:.6g}, min {self.trace[column].min():.6g}')
        print(f'Wall time: {self.seconds:.2f} s')
        print('=' * 72)

    def plot(self, ax=None, figsize=(7, 4)):
        """
        Plots the loss trace; returns the figure.
        """
        if ax is None:
            fig, ax = plt.subplots(figsize=figsize)
        else:
            fig = ax.figure
        plot_trace(self.trace, ax=ax, title=self.model_name)
        return fig

    def save_to_csv(self, path: str):
        """
        Function to save the trace dataframe to a csv
        """
        self.trace.to_csv(path, index=False, float_format='%.10g')


class SupervisedPretrainer(Protomodel):
    """
    Supervised pretraining of the depth network on labeled scenes.

    Parameters
    ----------
    params : ModelParams
        Starting parameters.
    n_views : int
        Views fed to the network (reference included).
    """

    def __init__(self, *, params, n_views=3, model_name='Supervised pretraining'):
        super().__init__()
        if not isinstance(params, ModelParams):
            raise TypeError("'params' must be a ModelParams.")
        self.params = params
        self.n_views = n_views
        self.model_name = model_name

    def fit(self, *, dataset, config=None, n_jobs=1, progress=True):
        """
        Fits the network with plain gradient descent on the primary loss.

        Parameters
        ----------
        dataset : list of SceneSample
        config : PretrainConfig, optional
        n_jobs : int, optional
        progress : bool, optional

        Returns
        -------
        self : SupervisedPretrainer
        """
        if not isinstance(dataset, list) or not dataset:
            raise TypeError("'dataset' must be a nonempty list of SceneSample.")
        config = PretrainConfig() if config is None else config
        self.dataset = dataset
        (params, trace), seconds = decorator_timer(pretrain)(
            self.params, dataset, config.epochs, config.lr, seed=config.seed,
            n_views=self.n_views, batch_size=config.batch_size, n_jobs=n_jobs, progress=progress)
        logger.info('%s took %.2f s.', self.model_name, seconds)
        self.results = TrainingResult(params=params, trace=trace, model_name=self.model_name,
                                      settings=vars(config), seconds=seconds)
        return self


class MetaAuxiliaryLearner(Protomodel):
    """
    Meta-auxiliary training: photometric inner steps, primary-loss outer
    updates.

    Parameters
    ----------
    params : ModelParams
        Starting (usually pretrained) parameters.
    """

    def __init__(self, *, params, model_name='Meta-auxiliary training'):
        super().__init__()
        if not isinstance(params, ModelParams):
            raise TypeError("'params' must be a ModelParams.")
        self.params = params
        self.model_name = model_name

    def fit(self, *, dataset, config=None, progress=True):
        """
        Runs meta-training.

        Parameters
        ----------
        dataset : list of SceneSample
        config : MetaConfig, optional
        progress : bool, optional

        Returns
        -------
        self : MetaAuxiliaryLearner
        """
        if not isinstance(dataset, list) or not dataset:
            raise TypeError("'dataset' must be a nonempty list of SceneSample.")
        config = MetaConfig() if config is None else config
        self.dataset = dataset
        (params, trace), seconds = decorator_timer(meta_train)(self.params, dataset, config,
                                                               progress=progress)
        logger.info('%s took %.2f s.', self.model_name, seconds)
        settings = {k: v for k, v in vars(config).items() if k != 'photo'}
        settings['photo'] = vars(config.photo)
        self.results = TrainingResult(params=params, trace=trace, model_name=self.model_name,
                                      settings=settings, seconds=seconds)
        return self
