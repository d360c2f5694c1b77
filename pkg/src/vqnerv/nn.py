"""Small layer library on top of the autograd engine."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Base class collecting named parameters from attributes (insertion order)."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, t in value.parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, t in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = t
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def load_parameters(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.parameters().items():
            key = prefix + name
            if key in values:
                arr = np.asarray(values[key], dtype=np.float32)
                if arr.shape != p.data.shape:
                    raise ValueError(f"parameter {key}: shape {arr.shape} != {p.data.shape}")
                p.data[...] = arr


def kaiming_conv(rng: np.random.Generator, out_ch: int, in_ch: int, kh: int, kw: int,
                 gain: float = np.sqrt(2.0)) -> np.ndarray:
    fan_in = in_ch * kh * kw
    std = gain / np.sqrt(fan_in)
    return rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw)).astype(np.float32)


class Conv2d(Module):
    """Conv layer: learned kernel plus optional per-channel bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 zero_init: bool = False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=np.float32)
        else:
            w = kaiming_conv(rng, out_ch, in_ch, kernel, kernel)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((out_ch, 1, 1), dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


class ChannelNorm(Module):
    """Per-channel normalization over the spatial dims, with affine scale/shift."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones((channels, 1, 1), dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1, 1), dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=(1, 2), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(1, 2), keepdims=True)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gamma + self.beta
