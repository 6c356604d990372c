# Module containing the miniature plane-sweep MVS network

import logging
from dataclasses import dataclass, field

import numpy as np

from mvsadapt import autodiff as ad
from mvsadapt import fileio
from mvsadapt.geometry import sample_at_depth

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Architecture:
    """
    Shape descriptor of the network.

    Parameters
    ----------
    in_channels : int
        Image channels.
    feature_channels : tuple of int
        Output width of each same-resolution convolution of the feature net;
        the last entry is the feature width F.
    kernel : int
        Odd kernel width of the feature convolutions.
    reg_kernel : int
        Odd kernel width of the (H, W, D) regulariser convolution.
    """
    in_channels: int = 3
    feature_channels: tuple = (8, 8)
    kernel: int = 3
    reg_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, 'feature_channels', tuple(int(c) for c in self.feature_channels))
        if not self.feature_channels or min(self.feature_channels) < 1 or self.in_channels < 1:
            raise ValueError('Channel counts must be positive.')
        for name in ('kernel', 'reg_kernel'):
            value = getattr(self, name)
            if value < 1 or value % 2 != 1:
                raise ValueError(f"'{name}' must be a positive odd integer, got {value}.")

    @property
    def feature_width(self):
        return self.feature_channels[-1]

    def layout(self):
        """
        Ordered (name, shape) pairs partitioning theta.
        """
        out = []
        c_in = self.in_channels
        for i, c_out in enumerate(self.feature_channels):
            out.append((f'conv{i}.weight', (self.kernel ** 2 * c_in, c_out)))
            out.append((f'conv{i}.bias', (c_out,)))
            c_in = c_out
        out.append(('proj.weight', (self.feature_width, 1)))
        out.append(('proj.bias', (1,)))
        out.append(('reg.weight', (self.reg_kernel ** 3, 1)))
        out.append(('reg.bias', (1,)))
        return out

    @property
    def param_count(self):
        return int(sum(np.prod(shape) for _, shape in self.layout()))

    def descriptor(self):
        return (self.in_channels, self.kernel, self.reg_kernel,
                len(self.feature_channels)) + self.feature_channels

    @classmethod
    def from_descriptor(cls, values):
        values = [int(v) for v in values]
        if len(values) < 4 or len(values) != 4 + values[3]:
            raise ValueError(f'Malformed architecture descriptor {values}.')
        return cls(in_channels=values[0], kernel=values[1], reg_kernel=values[2],
                   feature_channels=tuple(values[4:]))


class ModelParams:
    """
    Flat parameter vector together with the architecture partitioning it.

    Parameters
    ----------
    theta : np.ndarray or Var
        Flat parameters, length ``arch.param_count``.
    arch : Architecture
    """

    def __init__(self, theta, arch):
        if not isinstance(arch, Architecture):
            raise TypeError("'arch' must be an Architecture.")
        if not isinstance(theta, ad.Var):
            theta = np.array(theta, dtype=np.float64)
        if theta.ndim != 1 or theta.shape[0] != arch.param_count:
            raise ValueError(f"'theta' must be a vector of length {arch.param_count}, "
                             f"got shape {theta.shape}.")
        self.theta = theta
        self.arch = arch
        self._weights = None

    def __repr__(self):
        return f'ModelParams(n={self.arch.param_count}, arch={self.arch})'

    @property
    def values(self):
        """
        Parameters as a plain array.
        """
        return self.theta.value if isinstance(self.theta, ad.Var) else self.theta

    @property
    def weights(self):
        if self._weights is None:
            weights = {}
            offset = 0
            for name, shape in self.arch.layout():
                size = int(np.prod(shape))
                if isinstance(self.theta, ad.Var):
                    weights[name] = ad.reshape(self.theta[offset:offset + size], shape)
                else:
                    weights[name] = self.theta[offset:offset + size].reshape(shape)
                offset += size
            self._weights = weights
        return self._weights

    def with_theta(self, theta):
        return ModelParams(theta, self.arch)

    def copy(self):
        return ModelParams(self.values.copy(), self.arch)

    def save(self, path):
        fileio.write_checkpoint(path, self.arch.descriptor(), self.values)

    @classmethod
    def load(cls, path):
        descriptor, theta = fileio.read_checkpoint(path)
        return cls(theta, Architecture.from_descriptor(descriptor))


def init_params(arch, seed):
    """
    Deterministic initialisation: weights uniform in [-s, s] with
    s = sqrt(1 / fan_in), biases zero.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in arch.layout():
        if name.endswith('.bias'):
            chunks.append(np.zeros(shape).ravel())
            continue
        bound = np.sqrt(1.0 / shape[0])
        chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
    return ModelParams(np.concatenate(chunks), arch)


def extract_features(image, params):
    """
    Same-resolution convolutions with ELU between them.

    Parameters
    ----------
    image : np.ndarray or Var
        (H, W, C_in) image.
    params : ModelParams

    Returns
    -------
    Var
        (H, W, F) feature map.
    """
    weights = params.weights
    layers = len(params.arch.feature_channels)
    x = image
    for i in range(layers):
        x = ad.conv2d(x, weights[f'conv{i}.weight'], weights[f'conv{i}.bias'], params.arch.kernel)
        if i < layers - 1:
            x = ad.elu(x)
    return x


def build_feature_volumes(views, params, hyps):
    """
    Plane-sweep feature volumes, one (H, W, D, F) Var per view.

    The reference volume repeats the reference features over the D
    hypotheses; each source volume samples the source features where the
    reference pixels land on every hypothesised plane, zero where invalid.
    """
    if len(views) < 2:
        raise ValueError(f'Need at least 2 views, got {len(views)}.')
    ref = views[0]
    height, width = ref.shape
    depths = np.broadcast_to(hyps.values[:, None, None], (hyps.count, height, width))
    features = [extract_features(view.image, params) for view in views]
    width_f = features[0].shape[-1]
    volumes = [ad.broadcast_to(ad.reshape(features[0], (height, width, 1, width_f)),
                               (height, width, hyps.count, width_f))]
    for view, feature in zip(views[1:], features[1:]):
        values, _ = sample_at_depth(feature, ref.camera, view.camera, depths, height, width)
        volume = ad.reshape(values, (hyps.count, height, width, width_f))
        volumes.append(ad.transpose(volume, (1, 2, 0, 3)))
    return volumes


def variance_cost(volumes):
    """
    Elementwise variance across views, (1/N) sum_i (V_i - mean)**2.
    """
    if len(volumes) < 2:
        raise ValueError('Variance cost needs at least 2 volumes.')
    stacked = ad.stack(volumes, axis=0)
    centred = ad.sub(stacked, ad.mean(stacked, axis=0, keepdims=True))
    return ad.mean(ad.square(centred), axis=0)


def regularize(cost, params):
    """
    Probability volume from a (H, W, D, F) cost: per-cell projection F -> 1,
    one 3D convolution over (H, W, D) and a softmax over D of the negated
    score.
    """
    weights = params.weights
    height, width, depth, width_f = cost.shape
    score = ad.add(ad.matmul(ad.reshape(cost, (-1, width_f)), weights['proj.weight']),
                   weights['proj.bias'])
    score = ad.convolve(ad.reshape(score, (height, width, depth, 1)), weights['reg.weight'],
                        weights['reg.bias'], params.arch.reg_kernel, edge_axes=(2,))
    return ad.softmax(ad.neg(ad.reshape(score, (height, width, depth))), axis=2)


def expected_depth(pr, hyps):
    """
    Probability-weighted mean of the hypothesis depths.
    """
    return ad.sum_(ad.mul(pr, hyps.values), axis=2)


def forward(params, views, hyps):
    """
    Depth map (H, W) of the reference view ``views[0]`` from all ``views``.
    """
    volumes = build_feature_volumes(views, params, hyps)
    return expected_depth(regularize(variance_cost(volumes), params), hyps)


def primary_loss(pred, gt, valid):
    """
    Mean absolute depth error over valid pixels.
    """
    valid = np.asarray(valid, dtype=np.float64)
    count = valid.sum()
    if count == 0:
        raise ValueError('The valid mask is empty.')
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or gt.shape != valid.shape:
        raise ValueError(f'Shapes differ: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}.')
    residual = ad.mul(ad.abs_(ad.sub(pred, np.where(valid > 0, gt, 0.0))), valid)
    return ad.div(ad.sum_(residual), count)
