# Module containing utility functions for the library

import functools
import logging
from time import perf_counter

import numpy as np
from rich.logging import RichHandler

SEED_STRIDE = 1_000_003


def decorator_timer(some_function):
    """
    Decorator function to measure the execution time of a function.

    Parameters
    ----------
    some_function : function
        Input function to be timed.

    Returns
    ----------
    function: Wrapped function returning (result, seconds).
    """
    @functools.wraps(some_function)
    def wrapper(*args, **kwargs):
        t1 = perf_counter()
        result = some_function(*args, **kwargs)
        return result, perf_counter() - t1
    return wrapper


def scene_seed(seed, index, split='train'):
    """
    Seed of the ``index``-th scene of a split. Train seeds are even and test
    seeds odd, so the two splits never share a scene.

    Parameters
    ----------
    seed : int
        Dataset seed.
    index : int
        Scene index within the split.
    split : str
        'train' or 'test'.

    Returns
    ----------
    int: Scene seed.
    """
    if split not in ('train', 'test'):
        raise ValueError(f"'split' must be 'train' or 'test', got {split!r}.")
    base = 2 * (int(seed) * SEED_STRIDE + int(index))
    return base if split == 'train' else base + 1


def mean_std(values):
    """
    Mean and population standard deviation (ddof=0) of a sequence.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError('Need at least one value.')
    return float(values.mean()), float(values.std(ddof=0))


def setup_logging(verbose=False):
    """
    Routes library logging through a rich handler on the root logger.
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(message)s',
                        datefmt='[%X]',
                        handlers=[RichHandler(rich_tracebacks=False, show_path=verbose)],
                        force=True)
