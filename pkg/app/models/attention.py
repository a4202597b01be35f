#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Attention Operations - Операции внимания

Global multi-head self-attention, spatial window attention and channel group
attention, plus the window partition geometry they share. Windows are ordered
row-major over the grid (top-left window first) and patches row-major inside
each window; the ordering is part of the checkpoint contract.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from app.core import ops
from app.core.errors import ConfigError, DimensionError, GeometryError
from app.core.rng import Rng
from app.core.tensor import Tensor

SCALE_MODES = ("inv_sqrt_Cg", "inv_sqrt_P")


@dataclass
class AttentionParams:
    """
    Projection weights of one attention layer
    Веса проекций одного слоя внимания

    Weights are stored ``[in, out]`` so a projection is ``x @ w + b``.
    ``num_heads`` is N_h for spatial attention and N_g for channel attention.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Optional[Tensor]
    b_k: Optional[Tensor]
    b_v: Optional[Tensor]
    b_o: Optional[Tensor]
    num_heads: int

    def __post_init__(self):
        dim = self.dim
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (dim, dim):
                raise DimensionError.mismatch(f"AttentionParams.{name}", (dim, dim),
                                              getattr(self, name).shape)
        if self.num_heads < 1 or dim % self.num_heads:
            raise ConfigError(f"channels {dim} not divisible into {self.num_heads} heads/groups")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @classmethod
    def initialize(cls, dim: int, num_heads: int, rng: Rng, std: float = 0.02, dtype=np.float64,
                   bias: bool = True) -> "AttentionParams":
        def weight():
            return Tensor(rng.truncated_normal((dim, dim), std=std, dtype=dtype), requires_grad=True)

        def zeros():
            return Tensor(np.zeros(dim, dtype=dtype), requires_grad=True) if bias else None

        return cls(weight(), weight(), weight(), weight(), zeros(), zeros(), zeros(), zeros(),
                   num_heads)

    @classmethod
    def identity(cls, dim: int, num_heads: int, dtype=np.float64) -> "AttentionParams":
        eye = np.eye(dim, dtype=dtype)
        zero = np.zeros(dim, dtype=dtype)
        return cls(Tensor(eye), Tensor(eye), Tensor(eye), Tensor(eye),
                   Tensor(zero), Tensor(zero), Tensor(zero), Tensor(zero), num_heads)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    y = ops.matmul(x, weight)
    return y if bias is None else ops.add(y, bias)


@dataclass(frozen=True)
class WindowGrid:
    """Non-overlapping ``s x s`` tiling of an ``h x w`` grid"""

    height: int
    width: int
    side: int

    def __post_init__(self):
        if self.side < 1 or self.height % self.side or self.width % self.side:
            raise GeometryError(f"grid h={self.height}, w={self.width} is not divisible by "
                                f"window s={self.side}")

    @property
    def num_windows(self) -> int:
        return (self.height // self.side) * (self.width // self.side)

    @property
    def window_area(self) -> int:
        return self.side * self.side

    @property
    def num_patches(self) -> int:
        return self.num_windows * self.window_area


def window_partition(x: Tensor, side: int) -> Tensor:
    """``[N, h, w, C] -> [N*N_w, P_w, C]``, pure data movement"""
    if x.ndim != 4:
        raise DimensionError(f"window_partition expects [N,h,w,C], got {x.shape}")
    _, h, w, _ = x.shape
    grid = WindowGrid(h, w, side)
    return ops.rearrange(x, "n (hb s1) (wb s2) c -> (n hb wb) (s1 s2) c",
                         hb=h // grid.side, wb=w // grid.side, s1=grid.side, s2=grid.side)


def window_reverse(x: Tensor, grid: WindowGrid) -> Tensor:
    """``[N*N_w, P_w, C] -> [N, h, w, C]``, exact inverse of `window_partition`"""
    if x.ndim != 3 or x.shape[1] != grid.window_area or x.shape[0] % grid.num_windows:
        raise GeometryError(f"tensor {x.shape} is inconsistent with {grid.num_windows} windows "
                            f"of {grid.window_area} patches")
    return ops.rearrange(x, "(n hb wb) (s1 s2) c -> n (hb s1) (wb s2) c",
                         hb=grid.height // grid.side, wb=grid.width // grid.side,
                         s1=grid.side, s2=grid.side)


def _check_tokens(x: Tensor, params: AttentionParams, op: str):
    if x.ndim != 3 or x.shape[-1] != params.dim:
        raise DimensionError.mismatch(op, x.shape, (params.dim, params.dim))


def global_mhsa(x: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head self-attention over all P tokens of ``x [B, P, C]``"""
    _check_tokens(x, params, "global_mhsa")
    heads = params.num_heads
    q = ops.rearrange(linear(x, params.w_q, params.b_q), "b p (h d) -> b h p d", h=heads)
    k = ops.rearrange(linear(x, params.w_k, params.b_k), "b p (h d) -> b h p d", h=heads)
    v = ops.rearrange(linear(x, params.w_v, params.b_v), "b p (h d) -> b h p d", h=heads)

    scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(params.head_dim))
    weights = ops.softmax_lastaxis(scores)
    out = ops.rearrange(ops.matmul(weights, v), "b h p d -> b p (h d)", h=heads)
    return linear(out, params.w_o, params.b_o)


def window_attention(x: Tensor, params: AttentionParams, grid: WindowGrid) -> Tensor:
    """Self-attention restricted to each window of ``x [N, h, w, C]``"""
    if x.ndim != 4 or (x.shape[1], x.shape[2]) != (grid.height, grid.width):
        raise GeometryError(f"tensor {x.shape} does not match grid {grid.height}x{grid.width}")
    windows = window_partition(x, grid.side)
    return window_reverse(global_mhsa(windows, params), grid)


def channel_scale(scale_mode: str, num_patches: int, group_dim: int) -> float:
    if scale_mode == "inv_sqrt_Cg":
        return 1.0 / math.sqrt(group_dim)
    if scale_mode == "inv_sqrt_P":
        return 1.0 / math.sqrt(num_patches)
    raise ConfigError(f"scale_mode must be one of {SCALE_MODES}, got '{scale_mode}'")


def channel_group_attention(x: Tensor, params: AttentionParams, scale_mode: str = "inv_sqrt_Cg",
                            return_weights: bool = False
                            ) -> Union[Tensor, Tuple[Tensor, np.ndarray]]:
    """
    Single-head attention among channel tokens inside each channel group.

    Each group's channel tokens are the columns of its ``[P, C_g]`` slice, so
    scores form a ``C_g x C_g`` matrix ``Q_iᵀ K_i · scale`` summed over all P
    patches. ``return_weights`` also returns the softmax ``[B, N_g, C_g, C_g]``.
    """
    _check_tokens(x, params, "channel_group_attention")
    groups = params.num_heads
    factor = channel_scale(scale_mode, x.shape[1], params.head_dim)
    # [B, N_g, C_g, P]: one row per channel token
    q_t = ops.rearrange(linear(x, params.w_q, params.b_q), "b p (g d) -> b g d p", g=groups)
    k_t = ops.rearrange(linear(x, params.w_k, params.b_k), "b p (g d) -> b g d p", g=groups)
    v_t = ops.rearrange(linear(x, params.w_v, params.b_v), "b p (g d) -> b g d p", g=groups)

    scores = ops.scale(ops.matmul(q_t, ops.transpose(k_t)), factor)
    weights = ops.softmax_lastaxis(scores)
    out = ops.rearrange(ops.matmul(weights, v_t), "b g d p -> b p (g d)", g=groups)
    out = linear(out, params.w_o, params.b_o)
    if return_weights:
        return out, np.array(weights.data)
    return out
