"""Parameterised building blocks that declare their tensors in a ParamStore."""
from dataclasses import dataclass, field
from typing import Dict, Optional
import numpy as np
from models import nnprims as nn
from models.nnprims import ActivationPattern, ParamStore, Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class ForwardContext:
    """Per-call state shared by every layer of one forward pass"""
    store: ParamStore
    training: bool = False
    rng: Optional[np.random.Generator] = None
    pattern: Optional[ActivationPattern] = None
    _leaves: Dict[str, Tensor] = field(default_factory=dict)

    def param(self, name: str) -> Tensor:
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = self._leaves[name] = self.store.leaf(name)
        return leaf

    def buffer(self, name: str) -> np.ndarray:
        return self.store.buffers[name]

    def relu(self, x: Tensor) -> Tensor:
        return nn.relu(x, self.pattern)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        self.name = name
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.bias = bias
        store.add(name + ".weight", (out_channels, in_channels, kernel, kernel), fan_in=in_channels * kernel * kernel)
        if bias:
            store.add(name + ".bias", (out_channels,), init="zeros")

    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        bias = ctx.param(self.name + ".bias") if self.bias else None
        return nn.conv2d(x, ctx.param(self.name + ".weight"), bias, self.stride, self.padding)


class DepthwiseConv2d:
    def __init__(self, store: ParamStore, name: str, channels: int, kernel: int = 3, stride: int = 1):
        self.name = name
        self.stride = stride
        self.padding = kernel // 2
        store.add(name + ".weight", (channels, 1, kernel, kernel), fan_in=kernel * kernel)

    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        return nn.depthwise_conv2d(x, ctx.param(self.name + ".weight"), None, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.name = name
        store.add(name + ".weight", (channels,), init="ones")
        store.add(name + ".bias", (channels,), init="zeros")
        store.add_buffer(name + ".running_mean", (channels,), 0.0)
        store.add_buffer(name + ".running_var", (channels,), 1.0)

    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        return nn.batch_norm(x, ctx.param(self.name + ".weight"), ctx.param(self.name + ".bias"),
                             ctx.buffer(self.name + ".running_mean"), ctx.buffer(self.name + ".running_var"),
                             ctx.training, BN_MOMENTUM, BN_EPS)


class ConvBNReLU:
    """k x k convolution without bias, batch norm, ReLU"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, activation: bool = True):
        self.conv = Conv2d(store, name + ".conv", in_channels, out_channels, kernel, stride, bias=False)
        self.bn = BatchNorm2d(store, name + ".bn", out_channels)
        self.activation = activation

    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        out = self.bn(ctx, self.conv(ctx, x))
        return ctx.relu(out) if self.activation else out


class ConvReLU:
    """k x k convolution with bias followed by ReLU (no normalization)"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int, kernel: int = 3):
        self.conv = Conv2d(store, name, in_channels, out_channels, kernel, bias=True)

    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        return ctx.relu(self.conv(ctx, x))


class Dropout:
    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        if not ctx.training or self.rate == 0.0:
            return x
        if ctx.rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        return nn.dropout(x, self.rate, ctx.rng)
