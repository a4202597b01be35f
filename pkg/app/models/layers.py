#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Network Layers - Слои сети

Parameter containers and the layers the backbone is assembled from: linear
projections, layer norm, convolutional positional encoding, feed-forward
network, patch embedding, the two attention layers, stochastic depth and the
window / channel sub-blocks.
"""

import enum
import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from app.core import ops
from app.core.errors import ConfigError, ContractError
from app.core.rng import Rng
from app.core.tensor import Tensor
from app.models.attention import (
    AttentionParams, WindowGrid, channel_group_attention, window_attention,
)

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    """Forward pass mode"""
    TRAIN = "train"
    EVAL = "eval"


class Module:
    """
    Parameter container with ordered, dotted parameter names
    Контейнер параметров с упорядоченными именами
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if not name.startswith("_"):
            if isinstance(value, Module):
                self._modules[name] = value
            elif isinstance(value, Tensor) and value.requires_grad:
                self._parameters[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self):
        for _, param in self.named_parameters():
            param.zero_grad()


def _weight(rng: Rng, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.truncated_normal(shape, std=std, dtype=dtype), requires_grad=True)


def _zeros(size: int, dtype) -> Tensor:
    return Tensor(np.zeros(size, dtype=dtype), requires_grad=True)


def _ones(size: int, dtype) -> Tensor:
    return Tensor(np.ones(size, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, std: float = 0.02, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.weight = _weight(rng, (in_dim, out_dim), std, dtype)
        self.bias = _zeros(out_dim, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        super().__init__()
        self.weight = _ones(dim, dtype)
        self.bias = _zeros(dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class ConvPosEnc(Module):
    """Residual depthwise 3x3 convolution on ``[N, h, w, C]`` features"""

    def __init__(self, dim: int, rng: Rng, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.weight = _weight(rng, (dim, 1, 3, 3), std, dtype)
        self.bias = _zeros(dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        feat = ops.conv2d(ops.permute(x, (0, 3, 1, 2)), self.weight, self.bias,
                          stride=1, pad=1, groups=x.shape[-1])
        return ops.add(x, ops.permute(feat, (0, 2, 3, 1)))


class FeedForward(Module):
    """linear(C -> rC) -> gelu -> linear(rC -> C)"""

    def __init__(self, dim: int, ratio: int, rng: Rng, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng, std, dtype=dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, std, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class PatchEmbed(Module):
    """
    Stride convolution between stages.

    The stem (``norm_first=False``) is conv then norm on an NCHW image; the
    later embeddings are norm then conv on NHWC features. Output is NHWC.
    """

    def __init__(self, in_dim: int, out_dim: int, kernel: int, stride: int, pad: int,
                 norm_first: bool, rng: Rng, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.norm_first = norm_first
        if norm_first:
            self.norm = LayerNorm(in_dim, dtype)
        self.conv = Conv2d(in_dim, out_dim, kernel, rng, std, dtype)
        if not norm_first:
            self.norm = LayerNorm(out_dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self.norm_first:
            x = ops.permute(self.norm(x), (0, 3, 1, 2))
            return ops.permute(self.conv(x, self.stride, self.pad), (0, 2, 3, 1))
        x = ops.permute(self.conv(x, self.stride, self.pad), (0, 2, 3, 1))
        return self.norm(x)


class Conv2d(Module):
    def __init__(self, in_dim: int, out_dim: int, kernel: int, rng: Rng, std: float = 0.02,
                 dtype=np.float32):
        super().__init__()
        self.weight = _weight(rng, (out_dim, in_dim, kernel, kernel), std, dtype)
        self.bias = _zeros(out_dim, dtype)

    def __call__(self, x: Tensor, stride: int, pad: int) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=stride, pad=pad)


class AttentionLayer(Module):
    """Q/K/V/O projections shared by both attention kinds"""

    def __init__(self, dim: int, num_heads: int, rng: Rng, std: float = 0.02, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng, std, bias, dtype)
        self.k = Linear(dim, dim, rng, std, bias, dtype)
        self.v = Linear(dim, dim, rng, std, bias, dtype)
        self.o = Linear(dim, dim, rng, std, True, dtype)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.q.weight, self.k.weight, self.v.weight, self.o.weight,
                               self.q.bias, self.k.bias, self.v.bias, self.o.bias,
                               self.num_heads)


class WindowAttention(AttentionLayer):
    kind = "window"

    def __call__(self, x: Tensor, window: int) -> Tensor:
        _, h, w, _ = x.shape
        return window_attention(x, self.params, WindowGrid(h, w, window))


class ChannelGroupAttention(AttentionLayer):
    kind = "channel"

    def __init__(self, dim: int, num_groups: int, rng: Rng, scale_mode: str = "inv_sqrt_Cg",
                 std: float = 0.02, bias: bool = True, dtype=np.float32):
        super().__init__(dim, num_groups, rng, std, bias, dtype)
        self.scale_mode = scale_mode
        self.record_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def __call__(self, x: Tensor, window: int) -> Tensor:
        n, h, w, c = x.shape
        tokens = ops.reshape(x, (n, h * w, c))
        if self.record_attention:
            out, self.last_attention = channel_group_attention(
                tokens, self.params, self.scale_mode, return_weights=True)
        else:
            out = channel_group_attention(tokens, self.params, self.scale_mode)
        return ops.reshape(out, (n, h, w, c))


def drop_path(x: Tensor, p: float, mode=Mode.EVAL, rng: Optional[Rng] = None) -> Tensor:
    """Stochastic depth: drop whole samples of a residual branch, rescale by 1/(1-p)"""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop path probability must lie in [0, 1), got {p}")
    if Mode(mode) is Mode.EVAL or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode drop path needs an rng")
    keep = 1.0 - p
    draws = np.asarray(rng.uniform(size=x.shape[0]))
    mask = (draws < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    return ops.mul(x, Tensor(mask.reshape((x.shape[0],) + (1,) * (x.ndim - 1)), dtype=x.dtype))


class SubBlock(Module):
    """
    cpe1 -> norm1 -> attention -> residual, cpe2 -> norm2 -> FFN -> residual
    Под-блок: позиционное кодирование, внимание и FFN с остаточными связями
    """

    def __init__(self, kind: str, dim: int, num_heads: int, rng: Rng, ffn_ratio: int = 4,
                 ffn_enabled: bool = True, scale_mode: str = "inv_sqrt_Cg", qkv_bias: bool = True,
                 std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.kind = kind
        self.cpe1 = ConvPosEnc(dim, rng, std, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        if kind == "window":
            self.attn = WindowAttention(dim, num_heads, rng, std, qkv_bias, dtype)
        elif kind == "channel":
            self.attn = ChannelGroupAttention(dim, num_heads, rng, scale_mode, std, qkv_bias, dtype)
        else:
            raise ConfigError(f"unknown attention kind '{kind}'")
        self.cpe2 = ConvPosEnc(dim, rng, std, dtype)
        self.ffn_enabled = ffn_enabled
        if ffn_enabled:
            self.norm2 = LayerNorm(dim, dtype)
            self.ffn = FeedForward(dim, ffn_ratio, rng, std, dtype)

    def __call__(self, x: Tensor, window: int, drop_prob: float = 0.0, mode=Mode.EVAL,
                 rng: Optional[Rng] = None) -> Tensor:
        x = self.cpe1(x)
        x = ops.add(x, drop_path(self.attn(self.norm1(x), window), drop_prob, mode, rng))
        x = self.cpe2(x)
        if self.ffn_enabled:
            x = ops.add(x, drop_path(self.ffn(self.norm2(x)), drop_prob, mode, rng))
        return x


class DualBlock(Module):
    """
    Spatial-slot sub-block plus channel-slot sub-block
    Двойной блок: пространственное и канальное внимание
    """

    def __init__(self, spatial: SubBlock, channel: SubBlock, order: str = "window_first"):
        super().__init__()
        if order not in ("window_first", "channel_first", "parallel"):
            raise ConfigError(f"unknown block order '{order}'")
        self.order = order
        self.spatial = spatial
        self.channel = channel

    def __call__(self, x: Tensor, window: int, drop_probs: Tuple[float, float] = (0.0, 0.0),
                 mode=Mode.EVAL, rng: Optional[Rng] = None) -> Tensor:
        p_spatial, p_channel = drop_probs
        if self.order == "window_first":
            x = self.spatial(x, window, p_spatial, mode, rng)
            return self.channel(x, window, p_channel, mode, rng)
        if self.order == "channel_first":
            x = self.channel(x, window, p_channel, mode, rng)
            return self.spatial(x, window, p_spatial, mode, rng)
        both = ops.add(self.spatial(x, window, p_spatial, mode, rng),
                       self.channel(x, window, p_channel, mode, rng))
        return ops.sub(both, x)


class ClassifierHead(Module):
    """global average pool -> layer norm -> linear"""

    def __init__(self, dim: int, num_classes: int, rng: Rng, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(dim, dtype)
        self.fc = Linear(dim, num_classes, rng, std, dtype=dtype)

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(self.norm(ops.global_avg_pool(features)))
