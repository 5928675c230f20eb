"""Parameter containers shared by every network component."""
import math

import numpy as np

from .tensor import Tensor, layer_norm


class Parameter(Tensor):
    """A trainable tensor owned by a Module."""

    def __init__(self, data, requires_grad=True):
        super().__init__(data, requires_grad=requires_grad)


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


def normal(rng, shape, std=0.02):
    return Parameter(rng.normal(0.0, std, size=shape))


def zeros(shape):
    return Parameter(np.zeros(shape))


def ones(shape):
    return Parameter(np.ones(shape))


class Module:
    """
    Base class for components holding parameters.

    Parameters are discovered from instance attributes: Parameter values,
    nested Modules and lists of either. Names are dotted attribute paths and
    follow attribute assignment order, so they are stable across runs.
    """

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (item for item in value if isinstance(item, Module))

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def parameter_count(self):
        return sum(param.size for param in self.parameters())


class Linear(Module):
    """Affine map applied to the trailing axis: x @ weight + bias."""

    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.weight = xavier_uniform(rng, in_features, out_features)
        self.bias = zeros(out_features) if bias else None

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]

    def __call__(self, x):
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, width, eps=1e-5):
        super().__init__()
        self.gamma = ones(width)
        self.beta = zeros(width)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)
