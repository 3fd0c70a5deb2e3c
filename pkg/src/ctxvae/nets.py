"""Minimal layer/module plumbing shared by the VAE and the denoiser."""

from __future__ import annotations

import numpy as np

from . import tensor as T

__all__ = ["Module", "Conv", "ResBlock", "he_normal"]


class Module:
    """Container that collects Parameters from attributes, recursively.

    Attribute insertion order fixes parameter order, which keeps checkpoint
    manifests and gradient traversals stable across runs.
    """

    def named_parameters(self, prefix=""):
        out = []
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}" if prefix else attr
            out.extend(_collect(name, value))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def load_state(self, state, prefix=""):
        """Copy arrays from ``state`` (name -> array) into parameters."""
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name!r} shape mismatch: checkpoint "
                                 f"{arr.shape} vs model {p.data.shape}")
            p.data[...] = arr

    def state_arrays(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}


def _collect(name, value):
    if isinstance(value, T.Parameter):
        value.name = name
        return [(name, value)]
    if isinstance(value, Module):
        return value.named_parameters(prefix=name + ".")
    if isinstance(value, (list, tuple)):
        out = []
        for i, item in enumerate(value):
            out.extend(_collect(f"{name}.{i}", item))
        return out
    return []


def he_normal(rng, shape, fan_in, dtype, gain=1.0):
    std = gain * np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=shape)).astype(dtype)


class Conv(Module):
    """Convolution with bias; ``zero_init`` marks layers that start silent,
    ``gain`` scales the he-normal fan-in initialization otherwise."""

    def __init__(self, cin, cout, k, rng, dtype, stride=1, padding=None,
                 zero_init=False, gain=1.0, bias=True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype, gain=gain)
        self.w = T.Parameter(w)
        self.b = T.Parameter(np.zeros((1, cout, 1, 1), dtype=dtype)) if bias else None

    def __call__(self, x):
        out = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            out = out + self.b
        return out


class ResBlock(Module):
    """Pre-activation residual block: x + conv(silu(conv(silu(x))))."""

    def __init__(self, width, mid, rng, dtype):
        self.conv1 = Conv(width, mid, 3, rng, dtype)
        self.conv2 = Conv(mid, width, 3, rng, dtype, zero_init=True)

    def __call__(self, x):
        h = self.conv2(T.silu(self.conv1(T.silu(x))))
        return x + h
