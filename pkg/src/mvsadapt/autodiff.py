# Module containing the reverse-mode differentiation engine of the library

import functools
import logging
from contextlib import contextmanager

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

LEAF = 'leaf'
BOUNDS_TOL = 1e-9


class Var:
    """
    Differentiable handle on a float64 numpy array.

    A Var created by an operation on a recording Tape carries the index of
    its node on that tape; every other Var is a constant.

    Parameters
    ----------
    value : np.ndarray
        Forward value.
    tape : Tape, optional
        Tape owning the node, None for constants.
    node : int, optional
        Node index on ``tape``.
    """
    __slots__ = ('value', 'tape', 'node')
    # ndarray operands defer to the reflected Var operators
    __array_ufunc__ = None

    def __init__(self, value, tape=None, node=None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self, tuple(reversed(range(self.ndim))))

    def __repr__(self):
        kind = 'const' if self.tape is None else f'node={self.node}'
        return f'Var(shape={self.shape}, {kind})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def detach(self):
        """
        Returns a constant Var sharing this Var's value.
        """
        return Var(self.value)


class Node:
    __slots__ = ('op', 'inputs', 'output', 'attrs')

    def __init__(self, op, inputs, output, attrs):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.attrs = attrs


class Tape:
    """
    Append-only record of differentiable operations.

    Nodes are appended as operations execute, so the inputs of a node always
    precede it. A Tape is meant to be used from a single thread.

    Attributes
    ----------
    nodes : list of Node
        Recorded operations in execution order.
    leaves : list of int
        Node indices created with ``leaf``.
    recording : bool
        When False, operations on this tape's Vars return constants.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """
        Registers ``value`` (copied) as a differentiation root.

        Parameters
        ----------
        value : array-like
            Initial value of the leaf.

        Returns
        -------
        Var
            The leaf Var.
        """
        value = np.array(value, dtype=np.float64)
        value.flags.writeable = False
        var = Var(value, self, len(self.nodes))
        self.nodes.append(Node(None, (), var, {}))
        self.leaves.append(var.node)
        return var

    @contextmanager
    def recording_as(self, flag):
        old = self.recording
        self.recording = flag
        try:
            yield self
        finally:
            self.recording = old


def as_var(x):
    """
    Wraps numbers and arrays into constant Vars, passing Vars through.
    """
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def constant(x):
    return Var(np.array(x, dtype=np.float64))


class Op:
    """
    A primitive operation: a forward function on arrays and a vector-Jacobian
    product written with recorded operations, so that the backward pass can
    itself be recorded and differentiated.
    """

    def __init__(self, name, forward, vjp):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    def __repr__(self):
        return f'Op({self.name})'

    def __call__(self, *args, **attrs):
        inputs = tuple(as_var(a) for a in args)
        value = self.forward(*(v.value for v in inputs), **attrs)
        return _record(self, inputs, value, attrs)


def _record(op, inputs, value, attrs):
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise FloatingPointError(f"Operation '{op.name}' produced non-finite values.")
    tape = None
    for v in inputs:
        if v.tape is None:
            continue
        if tape is None:
            tape = v.tape
        elif v.tape is not tape:
            raise ValueError(f"Operation '{op.name}' mixes Vars from different tapes.")
    if tape is None or not tape.recording:
        return Var(value)
    if value.flags.writeable:
        value.flags.writeable = False
    out = Var(value, tape, len(tape.nodes))
    tape.nodes.append(Node(op, inputs, out, attrs))
    return out


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are incompatible.") from None


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# forward functions

def _add_forward(a, b):
    _check_broadcast('add', a, b)
    return a + b


def _sub_forward(a, b):
    _check_broadcast('sub', a, b)
    return a - b


def _mul_forward(a, b):
    _check_broadcast('mul', a, b)
    return a * b


def _div_forward(a, b):
    _check_broadcast('div', a, b)
    with np.errstate(divide='ignore', invalid='ignore'):
        return a / b


def _matmul_forward(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible.")
    return a @ b


def _reshape_forward(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}.")
    return x.reshape(shape)


def _sum_forward(x, axis, keepdims):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _sum_to_forward(x, shape):
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"sum_to: cannot reduce {x.shape} to {tuple(shape)}.")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _broadcast_to_forward(x, shape):
    try:
        return np.broadcast_to(x, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}.") from None


def _elu_forward(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _log_forward(x):
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.log(x)


def _where_forward(a, b, condition):
    _check_broadcast('where', a, b)
    return np.where(condition, a, b)


def _gather_forward(x, index):
    flat = np.concatenate([x.ravel(), np.zeros(1)])
    return flat[index]


def _scatter_forward(g, index, shape):
    if g.shape != index.shape:
        raise ValueError(f"scatter: values {g.shape} and index {index.shape} differ.")
    size = int(np.prod(shape))
    out = np.bincount(index.ravel(), weights=g.ravel(), minlength=size + 1)
    return out[:size].reshape(shape)


def _softmax_forward(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _box_filter_shape(ndim, size):
    return (size, size) + (1,) * (ndim - 2)


def _box_sum_forward(x, size):
    if x.ndim < 2 or size % 2 != 1:
        raise ValueError(f"box_sum: needs an odd window and at least 2 axes, got {size} and {x.shape}.")
    return ndimage.uniform_filter(x, size=_box_filter_shape(x.ndim, size),
                                  mode='constant', cval=0.0) * (size * size)


def _stack_forward(*values, axis):
    shapes = {v.shape for v in values}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes {sorted(shapes)} differ.")
    return np.stack(values, axis=axis)


# ---------------------------------------------------------------------------
# vector-Jacobian products, expressed with recorded operations

def _add_vjp(g, needs, inputs, output):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None)


def _sub_vjp(g, needs, inputs, output):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None)


def _mul_vjp(g, needs, inputs, output):
    a, b = inputs
    return (sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None)


def _div_vjp(g, needs, inputs, output):
    a, b = inputs
    ga = gb = None
    if needs[0]:
        ga = sum_to(div(g, b), a.shape)
    if needs[1]:
        gb = sum_to(neg(div(mul(g, output), b)), b.shape)
    return ga, gb


def _neg_vjp(g, needs, inputs, output):
    return (neg(g),)


def _matmul_vjp(g, needs, inputs, output):
    a, b = inputs
    return (matmul(g, transpose(b, (1, 0))) if needs[0] else None,
            matmul(transpose(a, (1, 0)), g) if needs[1] else None)


def _transpose_vjp(g, needs, inputs, output, axes):
    return (transpose(g, tuple(int(i) for i in np.argsort(axes))),)


def _reshape_vjp(g, needs, inputs, output, shape):
    return (reshape(g, inputs[0].shape),)


def _sum_vjp(g, needs, inputs, output, axis, keepdims):
    (x,) = inputs
    if not keepdims:
        axes = _normalize_axes(axis, x.ndim)
        kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
        g = reshape(g, kept)
    return (broadcast_to(g, x.shape),)


def _sum_to_vjp(g, needs, inputs, output, shape):
    return (broadcast_to(g, inputs[0].shape),)


def _broadcast_to_vjp(g, needs, inputs, output, shape):
    return (sum_to(g, inputs[0].shape),)


def _exp_vjp(g, needs, inputs, output):
    return (mul(g, output),)


def _log_vjp(g, needs, inputs, output):
    return (div(g, inputs[0]),)


def _elu_vjp(g, needs, inputs, output):
    positive = inputs[0].value > 0
    return (mul(g, where(positive, 1.0, add(output, 1.0))),)


def _abs_vjp(g, needs, inputs, output):
    return (mul(g, np.sign(inputs[0].value)),)


def _where_vjp(g, needs, inputs, output, condition):
    a, b = inputs
    return (sum_to(where(condition, g, 0.0), a.shape) if needs[0] else None,
            sum_to(where(condition, 0.0, g), b.shape) if needs[1] else None)


def _gather_vjp(g, needs, inputs, output, index):
    return (scatter(g, index, inputs[0].shape),)


def _scatter_vjp(g, needs, inputs, output, index, shape):
    return (_gather(g, index=index),)


def _softmax_vjp(g, needs, inputs, output, axis):
    weighted = mul(g, output)
    return (sub(weighted, mul(output, sum_(weighted, axis=axis, keepdims=True))),)


def _box_sum_vjp(g, needs, inputs, output, size):
    # a centred zero-padded box sum is self-adjoint
    return (box_sum(g, size),)


def _stack_vjp(g, needs, inputs, output, axis):
    lead = (slice(None),) * axis
    return tuple(index(g, lead + (i,)) if need else None
                 for i, need in enumerate(needs))


_add = Op('add', _add_forward, _add_vjp)
_sub = Op('sub', _sub_forward, _sub_vjp)
_mul = Op('mul', _mul_forward, _mul_vjp)
_div = Op('div', _div_forward, _div_vjp)
_neg = Op('neg', np.negative, _neg_vjp)
_matmul = Op('matmul', _matmul_forward, _matmul_vjp)
_transpose = Op('transpose', np.transpose, _transpose_vjp)
_reshape = Op('reshape', _reshape_forward, _reshape_vjp)
_sum = Op('sum', _sum_forward, _sum_vjp)
_sum_to = Op('sum_to', _sum_to_forward, _sum_to_vjp)
_broadcast_to = Op('broadcast_to', _broadcast_to_forward, _broadcast_to_vjp)
_exp = Op('exp', np.exp, _exp_vjp)
_log = Op('log', _log_forward, _log_vjp)
_elu = Op('elu', _elu_forward, _elu_vjp)
_abs = Op('abs', np.abs, _abs_vjp)
_where = Op('where', _where_forward, _where_vjp)
_gather = Op('gather', _gather_forward, _gather_vjp)
_scatter = Op('scatter', _scatter_forward, _scatter_vjp)
_softmax = Op('softmax', _softmax_forward, _softmax_vjp)
_box_sum = Op('box_sum', _box_sum_forward, _box_sum_vjp)
_stack = Op('stack', _stack_forward, _stack_vjp)


# ---------------------------------------------------------------------------
# public operations

def add(a, b):
    return _add(a, b)


def sub(a, b):
    return _sub(a, b)


def mul(a, b):
    return _mul(a, b)


def div(a, b):
    return _div(a, b)


def neg(x):
    return _neg(x)


def matmul(a, b):
    return _matmul(a, b)


def transpose(x, axes=None):
    x = as_var(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return _transpose(x, axes=tuple(int(a) for a in axes))


def _resolve_shape(size, shape):
    shape = tuple(int(s) for s in shape)
    unknown = [i for i, s in enumerate(shape) if s == -1]
    if len(unknown) > 1 or any(s < -1 for s in shape):
        raise ValueError(f"reshape: invalid target shape {shape}.")
    if unknown:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or size % known:
            raise ValueError(f"reshape: cannot infer {shape} for {size} elements.")
        shape = tuple(size // known if s == -1 else s for s in shape)
    return shape


def reshape(x, shape):
    """
    Reshapes ``x``; one entry of ``shape`` may be -1 and is inferred.
    """
    x = as_var(x)
    shape = _resolve_shape(x.value.size, shape)
    if x.shape == shape:
        return x
    return _reshape(x, shape=shape)


def sum_(x, axis=None, keepdims=False):
    return _sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_var(x)
    count = np.prod([x.shape[a] for a in _normalize_axes(axis, x.ndim)])
    return div(sum_(x, axis=axis, keepdims=keepdims), float(count))


def sum_to(x, shape):
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _sum_to(x, shape=shape)


def broadcast_to(x, shape):
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _broadcast_to(x, shape=shape)


def exp(x):
    return _exp(x)


def log(x):
    return _log(x)


def elu(x):
    return _elu(x)


def abs_(x):
    return _abs(x)


def square(x):
    x = as_var(x)
    return mul(x, x)


def where(condition, a, b):
    """
    Selects ``a`` where ``condition`` holds and ``b`` elsewhere.

    ``condition`` is a fixed boolean array; gradients flow only to the
    selected branch.
    """
    return _where(a, b, condition=np.asarray(condition, dtype=bool))


def clip(x, lo, hi):
    x = as_var(x)
    return where(x.value < lo, lo, where(x.value > hi, hi, x))


def gather(x, index):
    """
    Reads ``x.ravel()[index]``; entries of ``index`` equal to -1 read zero.

    Parameters
    ----------
    x : Var or array-like
        Source values.
    index : np.ndarray of int
        Flat indices into ``x``, any shape; -1 marks a zero read.

    Returns
    -------
    Var
        Values with the shape of ``index``.
    """
    x = as_var(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.max() >= x.size or index.min() < -1):
        raise ValueError(f"gather: index out of range for shape {x.shape}.")
    return _gather(x, index=np.where(index < 0, x.size, index))


def scatter(g, index, shape):
    """
    Adjoint of ``gather``: accumulates ``g`` into a zero array of ``shape``.

    ``index`` follows the internal convention of ``gather`` where the
    position ``prod(shape)`` is the discarded zero slot.
    """
    return _scatter(g, index=index, shape=tuple(shape))


def index(x, key):
    x = as_var(x)
    positions = np.arange(x.size).reshape(x.shape)[key]
    return gather(x, positions)


def take_along_axis(x, indices, axis):
    """
    Selection with fixed indices (min/max/top-k picks); the gradient flows
    only through the selected entries.
    """
    x = as_var(x)
    positions = np.take_along_axis(np.arange(x.size).reshape(x.shape), indices, axis)
    return gather(x, positions)


def softmax(x, axis=-1):
    x = as_var(x)
    return _softmax(x, axis=axis % x.ndim)


def box_sum(x, size):
    return _box_sum(x, size=int(size))


def stack(values, axis=0):
    values = [as_var(v) for v in values]
    if not values:
        raise ValueError('stack: nothing to stack.')
    axis = axis % (values[0].ndim + 1)
    return _stack(*values, axis=axis)


def huber(x, delta):
    """
    Huber penalty: x**2/2 inside ``[-delta, delta]``, linear outside.
    """
    if delta <= 0:
        raise ValueError(f"'delta' must be positive, got {delta}.")
    x = as_var(x)
    magnitude = abs_(x)
    quadratic = mul(square(x), 0.5)
    linear = mul(sub(magnitude, 0.5 * delta), delta)
    return where(magnitude.value <= delta, quadratic, linear)


@functools.lru_cache(maxsize=64)
def patch_index(spatial, channels, kernel, edge_axes=()):
    """
    Flat gather indices of the ``kernel``-wide neighbourhoods of every
    position of a (*spatial, channels) array.

    Out-of-range taps read zero (-1), except along ``edge_axes`` where the
    nearest edge value is repeated.

    Returns
    -------
    np.ndarray
        Read-only int array of shape (prod(spatial), kernel**n * channels)
        with taps in row-major offset order and channels fastest.
    """
    spatial = tuple(int(s) for s in spatial)
    n = len(spatial)
    pad = kernel // 2
    extent = np.array(spatial).reshape(n, 1, 1)
    positions = np.indices(spatial).reshape(n, -1)
    offsets = np.stack(np.meshgrid(*[np.arange(kernel) - pad] * n, indexing='ij')).reshape(n, -1)
    taps = positions[:, :, None] + offsets[:, None, :]
    for axis in edge_axes:
        taps[axis] = np.clip(taps[axis], 0, spatial[axis] - 1)
    inside = np.all((taps >= 0) & (taps < extent), axis=0)
    linear = np.ravel_multi_index(tuple(np.clip(taps, 0, extent - 1)), spatial)
    flat = linear[:, :, None] * channels + np.arange(channels)
    flat = np.where(inside[:, :, None], flat, -1).reshape(linear.shape[0], -1)
    flat.flags.writeable = False
    return flat


def convolve(x, weight, bias, kernel, edge_axes=()):
    """
    Same-size correlation of a channels-last array.

    Parameters
    ----------
    x : Var
        Input of shape (*spatial, C_in).
    weight : Var
        Filter of shape (kernel**n * C_in, C_out), taps in ``patch_index`` order.
    bias : Var
        Shape (C_out,).
    kernel : int
        Odd kernel width.
    edge_axes : tuple of int
        Spatial axes padded by edge replication instead of zeros.

    Returns
    -------
    Var
        Output of shape (*spatial, C_out).
    """
    x, weight = as_var(x), as_var(weight)
    spatial, channels = x.shape[:-1], x.shape[-1]
    taps = kernel ** len(spatial) * channels
    if weight.ndim != 2 or weight.shape[0] != taps:
        raise ValueError(f"convolve: weight shape {weight.shape} does not match input {x.shape} "
                         f"with kernel {kernel}.")
    idx = patch_index(tuple(spatial), int(channels), int(kernel), tuple(edge_axes))
    columns = gather(x, idx)
    out = add(matmul(columns, weight), bias)
    return reshape(out, tuple(spatial) + (weight.shape[1],))


def conv2d(x, weight, bias, kernel=3):
    x = as_var(x)
    if x.ndim != 3:
        raise ValueError(f"conv2d: expected an (H, W, C) input, got {x.shape}.")
    return convolve(x, weight, bias, kernel)


def bilinear_sample(grid, x, y):
    """
    Four-neighbour bilinear interpolation of ``grid`` at (x, y).

    Integer coordinates sit on pixel centres, x indexing columns and y rows.
    A sample is in bounds when 0 <= x <= W-1 and 0 <= y <= H-1 (within
    1e-9); other samples read zero and carry zero gradient.

    Parameters
    ----------
    grid : Var
        Values of shape (H, W, C).
    x, y : Var
        Sampling coordinates, each of shape (P,).

    Returns
    -------
    values : Var
        Shape (P, C).
    inside : np.ndarray of bool
        Shape (P,).
    """
    grid, x, y = as_var(grid), as_var(x), as_var(y)
    if grid.ndim != 3 or x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"bilinear_sample: got grid {grid.shape} and coordinates {x.shape}, {y.shape}.")
    height, width, channels = grid.shape
    xv, yv = x.value, y.value
    inside = ((xv >= -BOUNDS_TOL) & (xv <= width - 1 + BOUNDS_TOL)
              & (yv >= -BOUNDS_TOL) & (yv <= height - 1 + BOUNDS_TOL))
    x0 = np.clip(np.floor(np.where(inside, xv, 0.0)), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(np.where(inside, yv, 0.0)), 0, max(height - 2, 0)).astype(np.int64)
    fx = reshape(where(inside, sub(x, x0.astype(np.float64)), 0.0), (-1, 1))
    fy = reshape(where(inside, sub(y, y0.astype(np.float64)), 0.0), (-1, 1))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    lanes = np.arange(channels)

    def corner(yi, xi):
        flat = (yi * width + xi)[:, None] * channels + lanes
        return gather(grid, np.where(inside[:, None], flat, -1))

    gx, gy = sub(1.0, fx), sub(1.0, fy)
    out = add(add(mul(corner(y0, x0), mul(gx, gy)), mul(corner(y0, x1), mul(fx, gy))),
              add(mul(corner(y1, x0), mul(gx, fy)), mul(corner(y1, x1), mul(fx, fy))))
    return out, inside


def backward(loss, leaves, create_graph=False):
    """
    Reverse-mode gradients of a scalar ``loss`` with respect to ``leaves``.

    Parameters
    ----------
    loss : Var
        Scalar-shaped output recorded on a Tape.
    leaves : list of Var
        Vars on the same tape (leaves or intermediate results).
    create_graph : bool, optional
        Record the backward pass on the tape so the returned gradients can be
        differentiated again. Default is False.

    Returns
    -------
    list of Var
        One gradient per leaf, shaped like the leaf. A leaf that does not
        influence ``loss`` receives zeros.
    """
    if not isinstance(loss, Var):
        raise TypeError("'loss' must be a Var.")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}.")
    tape = loss.tape
    for leaf in leaves:
        if leaf.tape is None or (tape is not None and leaf.tape is not tape):
            raise ValueError('All leaves must live on the tape of the loss.')
    if tape is None:
        return [Var(np.zeros(leaf.shape)) for leaf in leaves]

    stop = loss.node
    wanted = {leaf.node for leaf in leaves}
    live = np.zeros(stop + 1, dtype=bool)
    for i in range(stop + 1):
        if i in wanted:
            live[i] = True
            continue
        node = tape.nodes[i]
        live[i] = any(v.tape is tape and v.node <= stop and live[v.node] for v in node.inputs)

    found = {}
    pending = {stop: Var(np.ones(loss.shape))}
    with tape.recording_as(create_graph):
        for i in range(stop, -1, -1):
            g = pending.pop(i, None)
            if g is None or not live[i]:
                continue
            if i in wanted:
                found[i] = g
            node = tape.nodes[i]
            if not node.inputs:
                continue
            needs = tuple(v.tape is tape and live[v.node] for v in node.inputs)
            if not any(needs):
                continue
            grads = node.op.vjp(g, needs, node.inputs, node.output, **node.attrs)
            for v, need, gv in zip(node.inputs, needs, grads):
                if not need or gv is None:
                    continue
                prior = pending.get(v.node)
                pending[v.node] = gv if prior is None else add(prior, gv)
    return [found[leaf.node] if leaf.node in found else Var(np.zeros(leaf.shape))
            for leaf in leaves]


def _evaluate(fn, value):
    out = fn(Tape().leaf(value))
    result = float(np.asarray(out.value).reshape(-1)[0])
    if not np.isfinite(result):
        raise FloatingPointError('Function value is not finite near the check point.')
    return result


def check_gradient(fn, point, step=1e-6):
    """
    Compares the tape gradient of ``fn`` at ``point`` with central differences.

    Parameters
    ----------
    fn : callable
        Maps a Var to a scalar Var.
    point : array-like
        Evaluation point.
    step : float, optional
        Finite-difference step. Default is 1e-6.

    Returns
    -------
    float
        max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
    """
    if step <= 0:
        raise ValueError(f"'step' must be positive, got {step}.")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(point)
    out = fn(leaf)
    if not isinstance(out, Var) or out.size != 1:
        raise ValueError('check_gradient needs a scalar-valued function.')
    if not np.isfinite(out.value).all():
        raise FloatingPointError('Function value is not finite at the check point.')
    (analytic,) = backward(out, [leaf])
    flat = point.ravel()
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + step
        upper = _evaluate(fn, shifted.reshape(point.shape))
        shifted[i] = flat[i] - step
        lower = _evaluate(fn, shifted.reshape(point.shape))
        numeric[i] = (upper - lower) / (2.0 * step)
    error = np.abs(analytic.value.ravel() - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(error.max()) if error.size else 0.0


RECORDERS = {
    'add': add, 'sub': sub, 'mul': mul, 'div': div, 'neg': neg, 'matmul': matmul,
    'transpose': transpose, 'reshape': reshape, 'sum': sum_, 'mean': mean,
    'sum_to': sum_to, 'broadcast_to': broadcast_to, 'exp': exp, 'log': log,
    'elu': elu, 'abs': abs_, 'square': square, 'where': where, 'gather': gather,
    'select': take_along_axis, 'softmax': softmax, 'box_sum': box_sum, 'stack': stack,
    'conv2d': conv2d, 'bilinear-sample': bilinear_sample, 'huber': huber, 'clip': clip,
}


def record(op_kind, *inputs, **attrs):
    """
    Applies the operation named ``op_kind`` to ``inputs``.

    Raises
    ------
    ValueError
        If ``op_kind`` is unknown or the input shapes do not fit it.
    """
    try:
        fn = RECORDERS[op_kind]
    except KeyError:
        raise ValueError(f"Unknown op kind '{op_kind}'. Valid kinds: {sorted(RECORDERS)}.") from None
    return fn(*inputs, **attrs)
