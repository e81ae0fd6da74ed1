"""Parameter containers: a tiny module system over ``Tensor``."""
import contextlib

import numpy as np

from . import functional as F
from .tensor import Tensor, get_dtype

_SHAPE_ONLY = False


@contextlib.contextmanager
def shape_only():
    """Build modules with uninitialized storage (for counting parameters)."""
    global _SHAPE_ONLY
    old = _SHAPE_ONLY
    _SHAPE_ONLY = True
    try:
        yield
    finally:
        _SHAPE_ONLY = old


def parameter(data):
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=True)


def normal(rng, std, shape):
    if _SHAPE_ONLY:
        # zero-stride view: no allocation, and still finite
        return np.broadcast_to(np.zeros((), dtype=get_dtype()), shape)
    return rng.normal(0.0, std, size=shape)


class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, F.BatchNormState):
                yield prefix + name + ".running_mean", value, "running_mean"
                yield prefix + name + ".running_var", value, "running_var"
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, std=0.02, zero=False, bias=True):
        w = np.zeros((n_in, n_out)) if zero else normal(rng, std, (n_in, n_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias)


class BatchNorm(Module):
    def __init__(self, dim, gain_init=1.0):
        self.gain = parameter(np.full(dim, gain_init))
        self.bias = parameter(np.zeros(dim))
        self.stats = F.BatchNormState(dim)

    def forward(self, x):
        return F.batch_norm(x, self.gain, self.bias, self.stats, self.training)


class LinearBN(Module):
    """1x1 convolution over tokens (a linear map) followed by batch norm."""

    def __init__(self, n_in, n_out, rng, std=0.02, bn_gain=1.0):
        self.linear = Linear(n_in, n_out, rng, std=std, bias=False)
        self.bn = BatchNorm(n_out, gain_init=bn_gain)

    def forward(self, x):
        return self.bn(self.linear(x))


class ConvBN(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, stride=2, std=0.02):
        self.kernel = parameter(normal(rng, std, (kernel, kernel, c_in, c_out)))
        self.stride = stride
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return self.bn(F.conv2d(x, self.kernel, self.stride))


def randomize_parameters(module, rng, std=0.3):
    """Overwrite every parameter with Gaussian noise (gradient tests need
    non-degenerate weights; zero-initialized output layers hide errors)."""
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(0.0, std, size=p.shape)
