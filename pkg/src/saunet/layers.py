"""Composite layers: DropBlock, batch normalization, the three convolutional
block flavors, and the spatial attention gate.

Stochastic layers draw from an explicit ``numpy.random.Generator`` in a fixed
(sample, channel) order, so a seed fully determines every mask.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    channel_reduce,
    concat_channels,
    conv2d,
    conv2d_transpose,
    power,
    relu,
    reshape,
    sigmoid,
    tensor_mean,
)

__all__ = [
    "DropBlockConfig",
    "dropblock_gamma",
    "dropblock_forward",
    "BatchNorm2d",
    "SpatialAttention",
    "Conv2d",
    "ConvTranspose2d",
    "ConvBlock",
    "BLOCK_KINDS",
]

BLOCK_KINDS = ("unet", "sdunet", "backbone")


@dataclass(frozen=True)
class DropBlockConfig:
    """Structured-dropout settings: square block edge and target dropped fraction."""

    block_size: int = 7
    drop_rate: float = 0.18

    def __post_init__(self):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError(f"block_size must be odd and positive, got {self.block_size}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")


def dropblock_gamma(drop_rate: float, block_size: int, feat_h: int, feat_w: int) -> float:
    """Bernoulli rate for block seeds that targets ``drop_rate`` dropped pixels.

    Scales the per-pixel rate by the block area and by the ratio of the full
    map to the region where a block fits entirely.  With block_size 1 this
    collapses to plain elementwise dropout.
    """
    if block_size > min(feat_h, feat_w):
        raise ValueError(f"block_size {block_size} exceeds feature map {feat_h}x{feat_w}")
    valid = (feat_h - block_size + 1) * (feat_w - block_size + 1)
    return (drop_rate / block_size**2) * (feat_h * feat_w) / valid


def _expand_seeds(seeds: np.ndarray, h: int, w: int, block: int) -> np.ndarray:
    """Union of block x block squares anchored at each seed (top-left) position."""
    m, hs, ws = seeds.shape
    dropped = np.zeros((m, h, w), dtype=bool)
    for i in range(block):
        for j in range(block):
            dropped[:, i : i + hs, j : j + ws] |= seeds
    return dropped


def dropblock_mask(
    n_planes: int, h: int, w: int, gamma: float, block: int, rng: np.random.Generator
) -> np.ndarray:
    """Binary keep-masks, one (h, w) plane per row, with zero-survivor rescue.

    A plane that keeps nothing is resampled once; if it still keeps nothing
    it passes everything through.
    """
    hs, ws = h - block + 1, w - block + 1
    seeds = rng.random((n_planes, hs, ws)) < gamma
    dropped = _expand_seeds(seeds, h, w, block)
    dead = np.flatnonzero(dropped.all(axis=(1, 2)))
    for plane in dead:
        retry = rng.random((hs, ws)) < gamma
        replacement = _expand_seeds(retry[None], h, w, block)[0]
        dropped[plane] = False if replacement.all() else replacement
    return ~dropped


def dropblock_forward(
    x: Tensor, cfg: DropBlockConfig, rng: Optional[np.random.Generator], train: bool
) -> Tensor:
    """Zero contiguous square regions per (sample, channel) plane and rescale
    survivors so the expected activation is preserved.  Identity when not
    training or when the drop rate is zero."""
    if not train or cfg.drop_rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropblock in train mode needs a random generator")
    if x.ndim != 4:
        raise ValueError("dropblock expects a 4-d input")
    n, c, h, w = x.shape
    gamma = dropblock_gamma(cfg.drop_rate, cfg.block_size, h, w)
    keep = dropblock_mask(n * c, h, w, gamma, cfg.block_size, rng)
    kept_counts = keep.sum(axis=(1, 2))
    scale = (h * w) / kept_counts
    mask = keep.astype(x.dtype) * scale[:, None, None].astype(x.dtype)
    return x * Tensor(mask.reshape(n, c, h, w))


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Training normalizes with biased batch moments and updates the running
    stats as ``momentum * old + (1 - momentum) * batch``; evaluation applies
    the deterministic affine map built from the running stats.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3, dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.moving_mean = np.zeros(channels, dtype=dtype)
        self.moving_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool, update_stats: Optional[bool] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [N, {self.channels}, H, W] input, got {x.shape}")
        if update_stats is None:
            update_stats = train
        c = self.channels
        if train:
            mu = tensor_mean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = tensor_mean(centered * centered, axis=(0, 2, 3), keepdims=True)
            if update_stats:
                m = self.momentum
                dt = self.moving_mean.dtype
                self.moving_mean = (m * self.moving_mean + (1.0 - m) * mu.data.reshape(c)).astype(dt)
                self.moving_var = (m * self.moving_var + (1.0 - m) * var.data.reshape(c)).astype(dt)
            xhat = centered * power(var + self.eps, -0.5)
        else:
            mm = Tensor(self.moving_mean.reshape(1, c, 1, 1))
            mv = Tensor(self.moving_var.reshape(1, c, 1, 1))
            xhat = (x - mm) * power(mv + self.eps, -0.5)
        return xhat * reshape(self.gamma, (1, c, 1, 1)) + reshape(self.beta, (1, c, 1, 1))


def _truncated_he(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    z = rng.standard_normal(shape)
    while True:
        bad = np.abs(z) > 2.0
        if not bad.any():
            break
        z[bad] = rng.standard_normal(int(bad.sum()))
    return (z * math.sqrt(2.0 / fan_in)).astype(dtype)


def _glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    """Convolution parameters plus the call that applies them."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        bias: bool = True,
        init: str = "he",
        dtype=DEFAULT_DTYPE,
    ):
        shape = (out_channels, in_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        if init == "he":
            w = _truncated_he(rng, shape, fan_in, dtype)
        elif init == "glorot":
            w = _glorot_uniform(rng, shape, fan_in, fan_out, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=stride, padding=padding)


class ConvTranspose2d:
    """Stride-2 upsampling convolution parameters (weight is [Cin, Cout, k, k])."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 2,
        dtype=DEFAULT_DTYPE,
    ):
        shape = (in_channels, out_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        self.stride = stride
        self.weight = Tensor(_truncated_he(rng, shape, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.weight, self.bias, stride=self.stride)


class SpatialAttention:
    """Pixelwise gate built from channel-pooled descriptors.

    Channel max and mean maps are stacked and pushed through a bias-free 7x7
    convolution and a sigmoid; the input is multiplied by the resulting
    single-channel map (98 parameters for the default kernel).
    """

    def __init__(self, rng: np.random.Generator, kernel: int = 7, dtype=DEFAULT_DTYPE):
        self.kernel = kernel
        fan_in = 2 * kernel * kernel
        fan_out = kernel * kernel
        w = _glorot_uniform(rng, (1, 2, kernel, kernel), fan_in, fan_out, dtype)
        self.weight = Tensor(w, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if min(x.shape[2], x.shape[3]) < self.kernel:
            warnings.warn(
                f"spatial attention kernel {self.kernel} exceeds feature map "
                f"{x.shape[2]}x{x.shape[3]}; same padding still applies",
                stacklevel=2,
            )
        pooled = concat_channels(channel_reduce(x, "max"), channel_reduce(x, "mean"))
        gate = sigmoid(conv2d(pooled, self.weight, bias=None, stride=1, padding="same"))
        return x * gate


class ConvBlock:
    """Two same-padded 3x3 convolutions with a per-kind post-conv pipeline.

    kind "unet": conv -> ReLU.  kind "sdunet": conv -> DropBlock -> ReLU.
    kind "backbone": conv -> DropBlock -> BN -> ReLU.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kind: str,
        rng: np.random.Generator,
        dropblock: Optional[DropBlockConfig] = None,
        dtype=DEFAULT_DTYPE,
    ):
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}")
        self.kind = kind
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, dtype=dtype)
        if kind in ("sdunet", "backbone"):
            if dropblock is None:
                raise ValueError(f"block kind {kind!r} needs a DropBlock config")
            self.dropblock = dropblock
        else:
            self.dropblock = None
        if kind == "backbone":
            self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
            self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        else:
            self.bn1 = self.bn2 = None

    def __call__(
        self,
        x: Tensor,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        update_stats: Optional[bool] = None,
    ) -> Tensor:
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2)):
            x = conv(x)
            if self.dropblock is not None:
                x = dropblock_forward(x, self.dropblock, rng, train)
            if bn is not None:
                x = bn(x, train, update_stats)
            x = relu(x)
        return x
