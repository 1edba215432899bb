"""Layer objects over the tensor engine.

Each layer owns its parameters, draws its initial weights from the generator
it is given (fan-in-scaled uniform, zero biases), and is callable as
``layer(x, train)``. Construction order therefore fixes the weight stream,
which makes model builds bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name = "layer"

    def params(self):
        return []

    def state(self):
        """Ordered (name, array) pairs to persist: parameters plus buffers."""
        return [(p.name, p.data) for p in self.params()]

    def __call__(self, x, train):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=1, *, rng, dtype=np.float32, name="conv"):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = c_in * kernel * kernel
        self.weight = T.Parameter(
            _fan_in_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype), name=f"{name}.weight"
        )

    def params(self):
        return [self.weight]

    def __call__(self, x, train):
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding, name=self.name)


class BatchNorm2d(Layer):
    def __init__(self, channels, *, dtype=np.float32, momentum=0.1, eps=1e-5, name="bn"):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = T.Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return [
            (f"{self.name}.gamma", self.gamma.data),
            (f"{self.name}.beta", self.beta.data),
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def __call__(self, x, train):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            train=train, momentum=self.momentum, eps=self.eps, name=self.name,
        )


class Linear(Layer):
    def __init__(self, d_in, d_out, *, rng, dtype=np.float32, name="fc"):
        self.name = name
        self.weight = T.Parameter(_fan_in_uniform(rng, (d_in, d_out), d_in, dtype), name=f"{name}.weight")
        self.bias = T.Parameter(np.zeros(d_out, dtype=dtype), name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, train):
        return T.linear(x, self.weight, self.bias, name=self.name)


class ReLU(Layer):
    name = "relu"

    def __call__(self, x, train):
        return T.relu(x)


class MaxPool2(Layer):
    name = "maxpool"

    def __call__(self, x, train):
        return T.max_pool2(x, name=self.name)


class GlobalAvgPool(Layer):
    name = "gap"

    def __call__(self, x, train):
        return T.global_avg_pool(x)


class Flatten(Layer):
    name = "flatten"

    def __call__(self, x, train):
        return T.flatten(x)
