"""Layer objects over the tensor ops, plus a plain sequential container."""
import numpy as np

from . import tensor as T
from .tensor import Parameter, RunningStats


def he_normal(rng, shape, fan_in, dtype, gain=2.0):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class Layer:
    kind = "layer"

    def parameters(self):
        return []

    def buffers(self):
        return {}

    def __call__(self, x, mode="eval", rng=None):
        return self.forward(x, mode, rng)


class Dense(Layer):
    kind = "dense"

    def __init__(self, din, dout, rng, name, dtype=np.float32, gain=2.0):
        self.W = Parameter(he_normal(rng, (din, dout), din, dtype, gain), f"{name}.W")
        self.b = Parameter(np.zeros(dout, dtype=dtype), f"{name}.b")

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x, mode, rng):
        return T.dense(x, self.W, self.b)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, cin, cout, kernel, rng, name, stride=1, padding=0, dtype=np.float32):
        fan_in = kernel * kernel * cin
        self.K = Parameter(he_normal(rng, (kernel, kernel, cin, cout), fan_in, dtype), f"{name}.K")
        self.b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.b")
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return [self.K, self.b]

    def forward(self, x, mode, rng):
        return T.conv2d(x, self.K, self.b, self.stride, self.padding)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode, rng):
        return T.relu(x)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, mode, rng):
        return T.sigmoid(x)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, window=2, stride=2):
        self.window = window
        self.stride = stride

    def forward(self, x, mode, rng):
        return T.maxpool2d(x, self.window, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode, rng):
        return T.flatten(x)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x, mode, rng):
        return T.global_avg_pool(x)


class BatchNorm1d(Layer):
    kind = "batchnorm1d"

    def __init__(self, dim, name, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, dtype=dtype), f"{name}.beta")
        self.running = RunningStats(dim, dtype)
        self.name = name

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running.mean,
                f"{self.name}.running_var": self.running.var}

    def forward(self, x, mode, rng):
        return T.batchnorm1d(x, self.gamma, self.beta, mode, self.running)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate):
        self.rate = rate

    def forward(self, x, mode, rng):
        return T.dropout(x, self.rate, mode, rng)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def kinds(self):
        return [layer.kind for layer in self.layers]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def __call__(self, x, mode="eval", rng=None):
        for layer in self.layers:
            x = layer(x, mode, rng)
        return x


def state_arrays(params, buffers):
    """Name -> array for everything a checkpoint must hold."""
    out = {p.name: p.data for p in params}
    out.update(buffers)
    return out


def load_state_arrays(params, buffers, arrays):
    from .errors import FormatError

    for p in params:
        if p.name not in arrays or arrays[p.name].shape != p.shape:
            raise FormatError(f"checkpoint lacks a matching tensor for {p.name}")
        p.data[...] = arrays[p.name]
    for name, buf in buffers.items():
        if name not in arrays or arrays[name].shape != buf.shape:
            raise FormatError(f"checkpoint lacks a matching buffer for {name}")
        buf[...] = arrays[name]
