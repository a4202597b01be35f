#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dual Attention Backbone - Основная модель
Four-stage hierarchical backbone built from dual attention blocks
"""

import logging
from typing import List, Optional, Union

import numpy as np

from app.core.errors import ContractError, DimensionError
from app.core.rng import Rng
from app.core.tensor import Tensor
from app.models.config import NUM_STAGES, ModelConfig, get_preset
from app.models.layers import (
    ChannelGroupAttention, ClassifierHead, DualBlock, Mode, Module, PatchEmbed, SubBlock,
)

logger = logging.getLogger(__name__)


class Stage(Module):
    def __init__(self, embed: PatchEmbed, blocks: List[DualBlock]):
        super().__init__()
        self.embed = embed
        self._blocks = list(blocks)
        for j, block in enumerate(blocks, start=1):
            setattr(self, f"block{j}", block)

    @property
    def blocks(self) -> List[DualBlock]:
        return self._blocks


class DaViT(Module):
    """
    Dual attention vision backbone
    Магистральная сеть с двойным вниманием
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.logger = logging.getLogger(__name__)
        self._config = config
        self._seed = seed
        self._dtype = np.dtype(dtype)
        rng = Rng(seed)
        std = config.init_std
        self._stages: List[Stage] = []

        in_dim = config.in_chans
        for s, dim in enumerate(config.stage_dims):
            embed = PatchEmbed(in_dim, dim, config.patch_kernels[s], config.patch_strides[s],
                               config.patch_pads[s], norm_first=s > 0, rng=rng, std=std,
                               dtype=dtype)
            first_kind, second_kind = config.sub_block_kinds(s + 1)
            blocks = []
            for _ in range(config.depths[s]):
                common = dict(dim=dim, num_heads=config.num_heads[s], rng=rng,
                              ffn_ratio=config.ffn_ratio, ffn_enabled=config.ffn_enabled,
                              scale_mode=config.scale_mode, qkv_bias=config.qkv_bias, std=std,
                              dtype=dtype)
                blocks.append(DualBlock(SubBlock(first_kind, **common),
                                        SubBlock(second_kind, **common), config.block_order))
            stage = Stage(embed, blocks)
            setattr(self, f"stage{s + 1}", stage)
            self._stages.append(stage)
            in_dim = dim
        self.head = ClassifierHead(in_dim, config.num_classes, rng, std, dtype)
        self._drop_rates = config.drop_path_rates()

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def dtype(self) -> np.dtype:
        return self._dtype

    @property
    def stages(self) -> List[Stage]:
        return self._stages

    def forward_features(self, x: Tensor, mode=Mode.EVAL, rng: Optional[Rng] = None) -> List[Tensor]:
        """Per-stage ``[N, h, w, C]`` outputs"""
        if x.ndim != 4 or x.shape[1] != self._config.in_chans:
            raise DimensionError(f"expected input [N,{self._config.in_chans},H,W], got {x.shape}")
        mode = Mode(mode)
        windows = self._config.stage_windows(x.shape[2], x.shape[3])
        features = []
        k = 0
        for s, stage in enumerate(self._stages):
            x = stage.embed(x)
            for block in stage.blocks:
                x = block(x, windows[s], (self._drop_rates[k], self._drop_rates[k + 1]), mode, rng)
                k += 2
            features.append(x)
        return features

    def forward(self, x: Tensor, mode=Mode.EVAL, rng: Optional[Rng] = None) -> Tensor:
        return self.head(self.forward_features(x, mode, rng)[-1])

    __call__ = forward

    def channel_attention_layer(self, stage: int) -> ChannelGroupAttention:
        """Last channel-attention layer of a 1-based stage"""
        if not 1 <= stage <= NUM_STAGES:
            raise ContractError(f"stage must lie in 1..{NUM_STAGES}, got {stage}")
        for block in reversed(self._stages[stage - 1].blocks):
            for sub in (block.channel, block.spatial):
                if isinstance(sub.attn, ChannelGroupAttention):
                    return sub.attn
        raise ContractError(f"stage {stage} has no channel attention layer")


def build_model(config: Union[str, ModelConfig], seed: int = 0, dtype=np.float32) -> DaViT:
    """Build and initialise a backbone from a preset name or an explicit config"""
    if isinstance(config, str):
        config = get_preset(config)
    model = DaViT(config, seed=seed, dtype=dtype)
    logger.info(f"built {config.name} model: dims {config.stage_dims}, depths "
                f"{list(config.depths)}, {model.num_parameters():,} parameters")
    return model


def forward(model: DaViT, x: Tensor, mode=Mode.EVAL, rng: Optional[Rng] = None) -> Tensor:
    return model.forward(x, mode, rng)


def forward_features(model: DaViT, x: Tensor, mode=Mode.EVAL,
                     rng: Optional[Rng] = None) -> List[Tensor]:
    return model.forward_features(x, mode, rng)
