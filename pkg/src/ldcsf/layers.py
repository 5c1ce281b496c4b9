"""Parameterised layers built on :mod:`ldcsf.ops`.

Modules own their parameter tensors and (for batch norm) numpy buffers.
Parameters start at zeros (ones for norm scales) and random schemes are
filled by :func:`init_parameters`, which
keys every tensor's random stream on ``(seed, qualified name)``.  A given
parameter therefore gets identical initial values in every model variant
that contains it.
"""

import math

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, get_default_dtype, make_rng, parameter


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) resampled until every draw lies within ``bound`` std."""
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    training = True

    def __init__(self):
        # local param name -> (scheme, arg); consumed by init_parameters
        self._init = {}
        self._buffer_names = []

    # -- registration ---------------------------------------------------------
    def add_param(self, name, shape, scheme="zeros", arg=None):
        fill = np.ones if scheme == "ones" else np.zeros
        t = parameter(fill(shape, dtype=get_default_dtype()), name=name)
        setattr(self, name, t)
        self._init[name] = (scheme, arg)
        return t

    def add_buffer(self, name, value):
        setattr(self, name, value)
        self._buffer_names.append(name)

    # -- traversal ------------------------------------------------------------
    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self):
        for prefix, mod in self.named_modules():
            for local in mod._init:
                yield prefix + local, getattr(mod, local)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for local in mod._buffer_names:
                yield prefix + local, getattr(mod, local)

    def load_buffer(self, qualified, value):
        prefix, _, local = qualified.rpartition(".")
        for name, mod in self.named_modules():
            if name == (prefix + "." if prefix else "") and local in mod._buffer_names:
                current = getattr(mod, local)
                if np.shape(current) != np.shape(value):
                    raise ShapeError(f"buffer {qualified}: shape {np.shape(value)} != {np.shape(current)}")
                setattr(mod, local, np.array(value, dtype=np.asarray(current).dtype))
                return
        raise KeyError(qualified)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    # -- mode -----------------------------------------------------------------
    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_parameters(module, seed):
    """Fill every parameter of ``module`` from its registered scheme."""
    for prefix, mod in module.named_modules():
        for local, (scheme, arg) in mod._init.items():
            p = getattr(mod, local)
            rng = make_rng(seed, prefix + local)
            if scheme == "zeros":
                values = np.zeros(p.shape)
            elif scheme == "ones":
                values = np.ones(p.shape)
            elif scheme == "trunc_normal":
                values = trunc_normal(rng, p.shape, std=arg)
            elif scheme == "kaiming_fan_out":
                values = rng.normal(0.0, math.sqrt(2.0 / arg), size=p.shape)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            p.data[...] = values
    return module


# ------------------------------------------------------------------- layers


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, std=0.02):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.add_param("weight", (out_features, in_features), "trunc_normal", std)
        self.bias = None
        if bias:
            self.add_param("bias", (out_features,))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("weight", (dim,), "ones")
        self.add_param("bias", (dim,))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param("weight", (channels,), "ones")
        self.add_param("bias", (channels,))
        self.add_buffer("running_mean", np.zeros(channels, dtype=get_default_dtype()))
        self.add_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))
        self.add_buffer("num_batches_tracked", np.zeros((), dtype=np.int64))

    def forward(self, x):
        if self.training:
            out, mu, var = ops.batch_norm2d(x, self.weight, self.bias, None, None, self.eps)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (n / (n - 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            self.num_batches_tracked = self.num_batches_tracked + 1
            return out
        if int(self.num_batches_tracked) == 0:
            raise RuntimeError("BatchNorm2d used in eval mode before any training step")
        return ops.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var, self.eps)


class Conv2d(Module):
    """Stride-1 'same' convolution with Kaiming (fan-out) init."""

    def __init__(self, in_ch, out_ch, kernel_size, bias=False):
        super().__init__()
        self.kernel_size = kernel_size
        self.add_param("weight", (out_ch, in_ch, kernel_size, kernel_size),
                       "kaiming_fan_out", out_ch * kernel_size * kernel_size)
        self.bias = None
        if bias:
            self.add_param("bias", (out_ch,))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel_size, bias=False):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ShapeError(f"depthwise kernel must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.add_param("weight", (channels, kernel_size, kernel_size),
                       "kaiming_fan_out", kernel_size * kernel_size)
        self.bias = None
        if bias:
            self.add_param("bias", (channels,))

    def forward(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, rate=0.1):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = make_rng(0)

    def forward(self, x):
        return ops.dropout(x, self.rate, self.rng, self.training)


def seq_to_img(tokens, side):
    """[N, side*side, C] -> [N, C, side, side]."""
    n, length, c = tokens.shape
    if length != side * side:
        raise ShapeError(f"{length} tokens do not form a {side}x{side} grid")
    return tokens.reshape(n, side, side, c).permute(0, 3, 1, 2)


def img_to_seq(fmap):
    n, c, h, w = fmap.shape
    return fmap.permute(0, 2, 3, 1).reshape(n, h * w, c)


__all__ = [
    "Module", "Linear", "LayerNorm", "BatchNorm2d", "Conv2d", "DepthwiseConv2d",
    "Dropout", "init_parameters", "trunc_normal", "seq_to_img", "img_to_seq", "Tensor",
]
