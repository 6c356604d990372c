import matplotlib.pyplot as plt
import numpy as np


def plot_trace(trace, ax=None, columns=None, title=None):
    """
    Plots training-trace columns against the first column (epoch or
    iteration).

    Parameters
    ----------
    trace : pd.DataFrame
        Trace returned by pretraining or meta-training.
    ax : matplotlib.axes.Axes, optional
        Axes to draw into; the current axes by default.
    columns : list of str, optional
        Loss columns to draw; every column ending in 'loss' by default.
    title : str, optional

    Returns
    -------
    matplotlib.axes.Axes
    """
    if ax is None:
        ax = plt.gca()
    x = trace.columns[0]
    if columns is None:
        columns = [c for c in trace.columns if c.endswith('loss')]
    colors = ['#001c54', '#7D0016', '#007D59']
    for i, column in enumerate(columns):
        ax.plot(trace[x], trace[column], color=colors[i % len(colors)], label=column)
    ax.set_xlabel(x)
    ax.set_ylabel('loss')
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(linestyle='--', color='k', alpha=0.15, zorder=-1)
    return ax


def plot_step_curve(curve, ax=None, metric='rel'):
    """
    Plots a step-sweep metric against the number of adaptation steps and
    marks its minimum.
    """
    if ax is None:
        ax = plt.gca()
    ax.plot(curve['steps'], curve[metric], color='#001c54', marker='o')
    best = curve[metric].idxmin()
    ax.plot(curve['steps'][best], curve[metric][best], marker='*', markersize=14,
            color='#7D0016', linestyle='none', label=f'best: {int(curve["steps"][best])} steps')
    ax.set_xlabel('test-time adaptation steps')
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    ax.grid(linestyle='--', color='k', alpha=0.15, zorder=-1)
    return ax


def plot_depth_panel(image, gt, pred, valid, d_min, d_max, figsize=(12, 3.5)):
    """
    Reference image, ground truth, prediction and relative error side by
    side.

    Returns
    -------
    matplotlib.figure.Figure
    """
    fig, axes = plt.subplots(1, 4, figsize=figsize)
    mask = np.asarray(valid) > 0
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title('reference')
    for ax, depth, title in ((axes[1], gt, 'ground truth'), (axes[2], pred, 'prediction')):
        shown = np.where(mask, depth, np.nan)
        im = ax.imshow(shown, vmin=d_min, vmax=d_max, cmap='viridis')
        ax.set_title(title)
    fig.colorbar(im, ax=axes[1:3].tolist(), shrink=0.8)
    safe_gt = np.where(mask, gt, 1.0)
    err = np.where(mask, np.abs(pred - gt) / safe_gt, np.nan)
    im = axes[3].imshow(err, cmap='magma')
    axes[3].set_title('|pred - gt| / gt')
    fig.colorbar(im, ax=axes[3], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return fig
