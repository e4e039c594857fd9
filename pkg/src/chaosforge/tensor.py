"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive validates operand shapes, checks its output for non-finite
values, and (when a tape is active and gradients are requested) records a
node holding the backward rule. Backward walks the tape once in reverse,
accumulating cotangents; a tape is consumed by its backward pass.
"""

import threading

import numpy as np
from scipy.special import erf, expit

from .util import NumericalError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


class Tensor:
    """A float64 array plus gradient metadata.

    requires_grad marks tensors that gradients should flow into (leaves) or
    through (results of primitives applied to such tensors). After backward,
    each participating leaf's .grad holds d(loss)/d(leaf).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite values in tensor literal")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records primitives applied to requires_grad tensors while active.

    Use as a context manager. Tapes are single-owner and single-threaded;
    run independent tapes for parallel work.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _local().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _local().stack
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False


class _TapeLocal(threading.local):
    def __init__(self):
        self.stack = []


_tape_local = _TapeLocal()


def _local():
    return _tape_local


def _active_tape():
    stack = _local().stack
    return stack[-1] if stack else None


def _check(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by primitive '{op}'")
    return arr


def _finish(op, out_arr, inputs, backward):
    """Wrap a primitive output, recording a tape node when gradients are live."""
    _check(out_arr, op)
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.grad = None
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = bool(tape is not None and needs)
    if out.requires_grad:
        if tape._consumed:
            raise RuntimeError("tape already consumed by backward")
        tape._nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    """Tensor without gradient tracking."""
    return Tensor(data, requires_grad=False)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _finish("matmul", out, (a, b), backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _finish("add", out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _finish("mul", out, (a, b), backward)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", out, (x,), backward)


def rms_normalize(x, axis=-1, eps=1e-12):
    """x / sqrt(mean(x^2) + eps) along axis; unit RMS up to eps."""
    x = _as_tensor(x)
    n = x.shape[axis]
    r = np.sqrt(np.mean(x.data * x.data, axis=axis, keepdims=True) + eps)
    out = x.data / r

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * (dot / n)) / r,)

    return _finish("rms_normalize", out, (x,), backward)


def layer_normalize(x, axis=-1, eps=1e-12):
    """(x - mean) / sqrt(var + eps) along axis; zero mean, unit variance."""
    x = _as_tensor(x)
    n = x.shape[axis]
    mu = np.mean(x.data, axis=axis, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True) + eps)
    out = centered / sigma

    def backward(g):
        gm = np.mean(g, axis=axis, keepdims=True)
        dot = np.mean(g * out, axis=axis, keepdims=True)
        return ((g - gm - out * dot) / sigma,)

    return _finish("layer_normalize", out, (x,), backward)


def gelu(x):
    """Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _finish("gelu", out, (x,), backward)


def sigmoid(x):
    x = _as_tensor(x)
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (x,), backward)


def sine(x):
    x = _as_tensor(x)
    out = np.sin(x.data)

    def backward(g):
        return (g * np.cos(x.data),)

    return _finish("sine", out, (x,), backward)


def cosine(x):
    x = _as_tensor(x)
    out = np.cos(x.data)

    def backward(g):
        return (g * -np.sin(x.data),)

    return _finish("cosine", out, (x,), backward)


def power(x, exponent):
    x = _as_tensor(x)
    p = float(exponent)
    out = x.data**p

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return _finish("power", out, (x,), backward)


def mean_over_axis(x, axis, keepdims=False):
    x = _as_tensor(x)
    axis = int(axis)
    n = x.shape[axis]
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _finish("mean_over_axis", out, (x,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _finish("concat", out, tensors, backward)


def slice_axis(x, axis, start, stop, step=1):
    """Slice along one axis, keeping dimensionality."""
    x = _as_tensor(x)
    ax = axis if axis >= 0 else x.ndim + axis
    key = [slice(None)] * x.ndim
    key[ax] = slice(start, stop, step)
    key = tuple(key)
    out = x.data[key].copy()

    def backward(g):
        gx = np.zeros(x.shape)
        gx[key] = g
        return (gx,)

    return _finish("slice", out, (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), backward)


def permute(x, axes):
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for ndim {x.ndim}")
    out = np.transpose(x.data, axes).copy()
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse).copy(),)

    return _finish("permute", out, (x,), backward)


def take_rows(x, indices):
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index array")
    out = x.data[idx].copy()

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish("take_rows", out, (x,), backward)


def depthwise_conv1d(x, kernel):
    """Per-feature temporal convolution with zero 'same' padding.

    x has shape (..., S, V, d) with S the token axis; kernel has shape (d, k)
    with odd k. Each feature channel is convolved along S with its own taps,
    shared across variables and batch entries.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim < 3:
        raise ShapeError("depthwise_conv1d input must have shape (..., S, V, d)")
    d, k = kernel.shape
    if x.shape[-1] != d:
        raise ShapeError(f"kernel channels {d} != input features {x.shape[-1]}")
    if k % 2 != 1:
        raise ShapeError("kernel width must be odd")
    pad = k // 2
    pad_spec = [(0, 0)] * x.ndim
    pad_spec[-3] = (pad, pad)
    xp = np.pad(x.data, pad_spec)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=x.ndim - 3)
    out = np.einsum("...svdk,dk->...svd", windows, kernel.data, optimize=True)

    def backward(g):
        gk = np.einsum("...svdk,...svd->dk", windows, g, optimize=True)
        gp = np.pad(g, pad_spec)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=x.ndim - 3)
        gx = np.einsum("...svdk,dk->...svd", gwin, kernel.data[:, ::-1], optimize=True)
        return (gx, gk)

    return _finish("depthwise_conv1d", out, (x, kernel), backward)


def gather_topk(x, k):
    """Top-k values along the last axis, ties broken toward the lowest index.

    Returns (values, indices); indices is a plain integer array (constant).
    """
    x = _as_tensor(x)
    if not 1 <= k <= x.shape[-1]:
        raise ShapeError(f"k={k} out of range for last axis {x.shape[-1]}")
    order = np.argsort(-x.data, axis=-1, kind="stable")
    idx = order[..., :k]
    out = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g, axis=-1)
        return (gx,)

    return _finish("gather_topk", out, (x,), backward), idx


def scatter_weighted_sum(rows, weights, indices, num_rows):
    """Accumulate weights[i] * rows[i] into output row indices[i].

    rows (n, d), weights (n,), integer indices (n,) -> (num_rows, d).
    Collisions add; untouched rows stay zero.
    """
    rows, weights = _as_tensor(rows), _as_tensor(weights)
    idx = np.asarray(indices, dtype=np.intp)
    if rows.ndim != 2 or weights.ndim != 1 or idx.ndim != 1:
        raise ShapeError("scatter_weighted_sum expects rows (n,d), weights (n,), indices (n,)")
    if not (rows.shape[0] == weights.shape[0] == idx.shape[0]):
        raise ShapeError("scatter_weighted_sum length mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError("scatter indices out of range")
    out = np.zeros((num_rows, rows.shape[1]))
    np.add.at(out, idx, rows.data * weights.data[:, None])

    def backward(g):
        g_sel = g[idx]
        return (g_sel * weights.data[:, None], np.sum(g_sel * rows.data, axis=1))

    return _finish("scatter_weighted_sum", out, (rows, weights), backward)


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(d_head)) v over the last two axes."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("attention operands must have ndim >= 2")
    dh = q.shape[-1]
    if k.shape[-1] != dh:
        raise ShapeError("query and key head dims differ")
    if v.shape[-2] != k.shape[-2]:
        raise ShapeError("key and value token counts differ")
    scale = 1.0 / np.sqrt(dh)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    scores -= np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / np.sum(e, axis=-1, keepdims=True)
    out = np.matmul(attn, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(attn, -1, -2), g)
        g_attn = np.matmul(g, np.swapaxes(v.data, -1, -2))
        dot = np.sum(g_attn * attn, axis=-1, keepdims=True)
        g_scores = attn * (g_attn - dot) * scale
        gq = np.matmul(g_scores, k.data)
        gk = np.matmul(np.swapaxes(g_scores, -1, -2), q.data)
        return (_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape))

    return _finish("scaled_dot_attention", out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# convenience compositions (each expands to recorded primitives)


def neg(x):
    return mul(x, constant(-1.0))

def sub(a, b):
    return add(a, neg(b))

def scale(x, c):
    return mul(x, constant(float(c)))

def shift(x, c):
    return add(x, constant(float(c)))

def sum_over_axis(x, axis, keepdims=False):
    n = _as_tensor(x).shape[axis]
    return scale(mean_over_axis(x, axis, keepdims), float(n))

def mean_all(x):
    out = x
    for _ in range(_as_tensor(x).ndim):
        out = mean_over_axis(out, -1)
    return out


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax": softmax,
    "rms_normalize": rms_normalize,
    "layer_normalize": layer_normalize,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "sine": sine,
    "cosine": cosine,
    "power": power,
    "mean_over_axis": mean_over_axis,
    "concat": concat,
    "slice": slice_axis,
    "reshape": reshape,
    "permute": permute,
    "take_rows": take_rows,
    "depthwise_conv1d": depthwise_conv1d,
    "gather_topk": gather_topk,
    "scatter_weighted_sum": scatter_weighted_sum,
    "scaled_dot_attention": scaled_dot_attention,
}


def primitive_forward(op_kind, *args, **kwargs):
    """Dispatch a primitive by name. gather_topk returns (values, indices)."""
    try:
        fn = _DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{op_kind}'") from None
    return fn(*args, **kwargs)


def backward(tape, loss):
    """Propagate d(loss)=1 through the tape; consumes the tape.

    loss must be a scalar tensor produced on the tape. Leaf gradients
    accumulate into each leaf's .grad (created if absent).
    """
    if tape._consumed:
        raise RuntimeError("tape already consumed by backward")
    tape._consumed = True
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    produced = {id(node.out) for node in tape._nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for t, gt in zip(node.inputs, input_grads):
            if gt is None or not t.requires_grad:
                continue
            if gt.shape != t.data.shape:
                raise ShapeError(f"backward produced grad shape {gt.shape} for tensor {t.shape}")
            if id(t) in produced:
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gt
                else:
                    grads[id(t)] = gt
            else:
                if t.grad is None:
                    t.grad = gt.copy() if gt.base is not None else gt
                else:
                    t.grad = t.grad + gt
    tape._nodes.clear()


def finite_diff_check(f, x, step=1e-5):
    """Compare tape gradients of scalar f at x against central differences.

    Returns the max over coordinates of
    |analytic - numeric| / (|numeric| + 1e-12).
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with GradTape() as tape:
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
        backward(tape, y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += step
        xm = base.copy()
        xm.flat[i] -= step
        fp = float(f(Tensor(xp)).data)
        fm = float(f(Tensor(xm)).data)
        flat[i] = (fp - fm) / (2.0 * step)
    denom = np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
