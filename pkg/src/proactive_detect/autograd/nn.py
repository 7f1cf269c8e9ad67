"""Layers built on the tensor ops: convolution, batch norm, dense."""
from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, batch_norm, conv2d, matmul


class Module:
    training = True

    def named_parameters(self, prefix=""):
        out = []
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        out = []
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                out.extend(value.named_buffers(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{full}.{i}."))
        return out

    def state_dict(self, prefix=""):
        state = {n: p.data for n, p in self.named_parameters(prefix)}
        state.update(dict(self.named_buffers(prefix)))
        return state

    def load_state_dict(self, state, prefix=""):
        for n, p in self.named_parameters(prefix):
            if n not in state:
                raise KeyError(f"missing entry {n!r} in checkpoint")
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} != parameter shape {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)
            p.zero_grad()
        self._load_buffers(state, prefix)

    def _load_buffers(self, state, prefix):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                value._load_buffers(state, full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._load_buffers(state, f"{full}.{i}.")

    def train(self, mode=True):
        self.training = mode
        for value in self.__dict__.values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, rng, kernel=3, bias=True, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(fan_in_uniform(rng, (kernel, kernel, in_ch, out_ch), fan_in, dtype))
        self.bias = Parameter(fan_in_uniform(rng, (out_ch,), fan_in, dtype)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch statistics while training, running statistics in eval mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        if self.training:
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.eps)
            n = x.data.size // x.shape[-1]
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            return out
        inv = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype))
        scale = self.gamma * inv
        shift = self.beta - scale * Tensor(self.running_mean.astype(x.dtype))
        return x * scale + shift

    def named_buffers(self, prefix=""):
        return [(f"{prefix}running_mean", self.running_mean), (f"{prefix}running_var", self.running_var)]

    def _load_buffers(self, state, prefix):
        self.running_mean = np.array(state[f"{prefix}running_mean"], dtype=self.running_mean.dtype)
        self.running_var = np.array(state[f"{prefix}running_var"], dtype=self.running_var.dtype)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, rng, kernel=3, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, rng, kernel=kernel, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x)).relu()


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = Parameter(fan_in_uniform(rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(fan_in_uniform(rng, (out_features,), in_features, dtype))

    def forward(self, x):
        return matmul(x, self.weight) + self.bias
