"""Differentiable primitives.

Each function takes :class:`~ldcsf.tensor.Tensor` operands (plain arrays and
scalars are accepted as constants), checks shapes eagerly, and returns a
tensor whose backward closure maps the upstream gradient to one gradient
per parent.  Broadcasting is limited to numpy's rules for ``add``/``mul``,
which the model needs for bias-add and channel-wise scaling only.
"""

import math

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

# When a list, piecewise ops append a fingerprint of their active branch.
# Finite-difference checks use it to detect perturbations that cross a kink.
_regime_log = None


class track_regimes:
    def __enter__(self):
        global _regime_log
        self._prev, _regime_log = _regime_log, []
        return _regime_log

    def __exit__(self, *exc):
        global _regime_log
        _regime_log = self._prev
        return False


def _record_regime(*masks):
    if _regime_log is not None:
        _regime_log.append(b"".join(np.packbits(m).tobytes() for m in masks))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return a, b


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = a.data**exponent
    return make_result(y, (a,), backward, "power")


def matmul(a, b):
    """Batched matrix product; leading (batch) dims must match exactly."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x[..., in] @ weight[out, in].T + bias[out]``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(y, parents, backward, "linear")


# ----------------------------------------------------------- shape movement


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(y, (x,), backward, "reshape")


def permute(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "permute")


def getitem(x, index):
    """Basic (slice/int) indexing.  Advanced indexing is rejected."""
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if not (isinstance(part, (int, slice)) or part is Ellipsis or part is None):
            raise TypeError("getitem supports ints, slices, Ellipsis and None only")
    y = np.array(x.data[index], copy=True, order="C")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_result(y, (x,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_result(y, tuple(tensors), backward, "concat")


def roll(x, shifts, axes):
    shifts, axes = tuple(shifts), tuple(axes)

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return make_result(np.roll(x.data, shifts, axis=axes), (x,), backward, "roll")


def pad(x, widths):
    """Zero padding; ``widths`` as for ``np.pad``."""
    widths = tuple(tuple(w) for w in widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def backward(g):
        return (np.ascontiguousarray(g[crop]),)

    return make_result(np.pad(x.data, widths), (x,), backward, "pad")


def take_rows(table, index):
    """Gather ``table[index]`` along axis 0; gradients scatter-add back."""
    index = np.asarray(index)
    if index.min() < 0 or index.max() >= table.shape[0]:
        raise ShapeError("take_rows: index out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.ravel(), g.reshape(index.size, *table.shape[1:]))
        return (gt,)

    return make_result(table.data[index], (table,), backward, "take_rows")


# --------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(y), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    y = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(y).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), backward, "mean")


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C]: per-channel spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3))


# -------------------------------------------------------------- activations


def relu(x):
    mask = x.data > 0
    _record_regime(mask)

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, "relu")


def sigmoid(x):
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), backward, "sigmoid")


def gelu(x):
    """tanh approximation of GELU."""
    d = x.data
    inner = _SQRT_2_OVER_PI * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t**2) * dinner),)

    return make_result(y.astype(d.dtype), (x,), backward, "gelu")


def h_swish(x):
    """x * relu6(x + 3) / 6."""
    d = x.data
    y = d * np.clip(d + 3.0, 0.0, 6.0) / 6.0
    _record_regime(d <= -3.0, d >= 3.0)

    def backward(g):
        slope = np.where(d <= -3.0, 0.0, np.where(d >= 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
        return (g * slope.astype(d.dtype),)

    return make_result(y, (x,), backward, "h_swish")


def softmax(x):
    """Softmax over the last axis, max-subtracted."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def dropout(x, rate, rng, training):
    """Inverted dropout.  In eval mode (or rate 0) returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------------ normalisation


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the trailing axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(y, (x, gamma, beta), backward, "layer_norm")


def batch_norm2d(x, gamma, beta, mean_, var, eps=1e-5):
    """Normalise [N,C,H,W] per channel.

    ``mean_``/``var`` given as arrays means eval mode (constants); ``None``
    means train mode, and the batch statistics are returned alongside.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: params {gamma.shape} vs {c} channels")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    training = mean_ is None
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batch_norm2d in train mode needs N*H*W >= 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        v = (xc * xc).mean(axis=axes, keepdims=True)
    else:
        mu = np.asarray(mean_, dtype=x.dtype).reshape(bshape)
        v = np.asarray(var, dtype=x.dtype).reshape(bshape)
        xc = x.data - mu
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = make_result(y, (x, gamma, beta), backward, "batch_norm2d")
    if training:
        return out, mu.reshape(c), v.reshape(c)
    return out


# ------------------------------------------------------------- convolutions


def _check_odd_kernel(k):
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd for 'same' padding, got {k}")


def conv2d(x, weight, bias=None):
    """Stride-1 'same' convolution, ``weight`` [Co,Ci,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}, {weight.shape}")
    if weight.shape[1] != x.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight {weight.shape} vs input {x.shape}")
    _check_odd_kernel(weight.shape[2])
    y = kernels.conv2d_forward(x.data, weight.data)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw = kernels.conv2d_backward(x.data, weight.data, g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(y, parents, backward, "conv2d")


def depthwise_conv2d(x, weight, bias=None):
    """One k*k filter per channel, ``weight`` [C,k,k], zero 'same' padding."""
    if x.ndim != 4 or weight.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects [N,C,H,W] and [C,k,k], got {x.shape}, {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_conv2d: {weight.shape[0]} filters for {x.shape[1]} channels")
    if weight.shape[1] != weight.shape[2]:
        raise ShapeError("depthwise_conv2d: kernel must be square")
    _check_odd_kernel(weight.shape[1])
    y = kernels.depthwise_conv2d_forward(x.data, weight.data)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw = kernels.depthwise_conv2d_backward(x.data, weight.data, g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(y, parents, backward, "depthwise_conv2d")


# --------------------------------------------------------------------- loss


def bce_with_logits(logits, targets):
    """Per-column batch-mean binary cross-entropy, returned as float64 [K].

    The loss is evaluated in float64 whatever the logits' precision so that
    the per-label terms and their sum are exact in the log.
    """
    if logits.ndim != 2:
        raise ShapeError(f"bce_with_logits expects [N,K] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("targets must be multi-hot with entries in {0, 1}")
    z = logits.data.astype(np.float64)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.shape[0]
    y = per.mean(axis=0)

    def backward(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        return (((p - t) / n * g[None, :]).astype(logits.dtype),)

    return make_result(y, (logits,), backward, "bce_with_logits")


__all__ = [
    "Tensor", "add", "sub", "mul", "power", "matmul", "linear", "reshape", "permute",
    "getitem", "concat", "roll", "pad", "take_rows", "sum", "mean", "global_avg_pool",
    "relu", "sigmoid", "gelu", "h_swish", "softmax", "dropout", "layer_norm",
    "batch_norm2d", "conv2d", "depthwise_conv2d", "bce_with_logits",
]
