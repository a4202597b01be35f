#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Model Configuration - Конфигурация модели
Hyperparameter record for the dual-attention backbone and its named presets
"""

import logging
from typing import Any, Dict, List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from app.core.errors import ConfigError, GeometryError
from app.core.ops import conv_output_size

logger = logging.getLogger(__name__)

ScaleMode = Literal["inv_sqrt_Cg", "inv_sqrt_P"]
WindowMode = Literal["fit", "fixed", "global"]
BlockOrder = Literal["window_first", "channel_first", "parallel"]

NUM_STAGES = 4


class ModelConfig(BaseModel):
    """
    Full hyperparameter record
    Полный набор гиперпараметров модели
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "custom"
    base_dim: int = 96
    depths: Tuple[int, int, int, int] = (1, 1, 3, 1)
    num_heads: Tuple[int, int, int, int] = (3, 6, 12, 24)
    head_dim: int = 32
    window_size: int = 7
    window_mode: WindowMode = "fit"
    fit_window: int = 12
    ffn_ratio: int = 4
    ffn_enabled: bool = True
    drop_path_rate: float = 0.1
    num_classes: int = 1000
    in_chans: int = 3
    scale_mode: ScaleMode = "inv_sqrt_Cg"
    patch_kernels: Tuple[int, int, int, int] = (7, 2, 2, 2)
    patch_strides: Tuple[int, int, int, int] = (4, 2, 2, 2)
    patch_pads: Tuple[int, int, int, int] = (3, 0, 0, 0)
    block_order: BlockOrder = "window_first"
    channel_stages: Tuple[int, ...] = (1, 2, 3, 4)
    window_stages: Tuple[int, ...] = (1, 2, 3, 4)
    qkv_bias: bool = True
    init_std: float = 0.02

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        positive = {
            "base_dim": self.base_dim, "head_dim": self.head_dim, "window_size": self.window_size,
            "fit_window": self.fit_window,
            "ffn_ratio": self.ffn_ratio, "num_classes": self.num_classes, "in_chans": self.in_chans,
        }
        for field_name, value in positive.items():
            if value < 1:
                raise ValueError(f"{field_name} must be >= 1, got {value}")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"every stage needs at least one dual block, got depths {self.depths}")
        for stage, (dim, heads) in enumerate(zip(self.stage_dims, self.num_heads), start=1):
            if heads < 1 or dim != heads * self.head_dim:
                raise ValueError(
                    f"stage {stage} dim {dim} != heads {heads} x head_dim {self.head_dim}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if any(k < 1 for k in self.patch_kernels) or any(s < 1 for s in self.patch_strides) \
                or any(p < 0 for p in self.patch_pads):
            raise ValueError("patch kernels/strides must be >= 1 and pads >= 0")
        for field_name in ("channel_stages", "window_stages"):
            stages = getattr(self, field_name)
            if any(s not in range(1, NUM_STAGES + 1) for s in stages):
                raise ValueError(f"{field_name} entries must lie in 1..{NUM_STAGES}, got {stages}")
        return self

    # ------------------------------------------------------------ creation
    @classmethod
    def create(cls, **values: Any) -> "ModelConfig":
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigError(f"invalid model config: {_first_error(exc)}") from None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        """Config-file form: optional ``preset`` base plus field overrides"""
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is None:
            return cls.create(**data)
        return get_preset(preset).with_overrides(**data)

    def with_overrides(self, **values: Any) -> "ModelConfig":
        merged = self.model_dump()
        merged.update(values)
        return ModelConfig.create(**merged)

    # ---------------------------------------------------------- geometry
    @property
    def stage_dims(self) -> List[int]:
        return [self.base_dim * 2 ** s for s in range(NUM_STAGES)]

    @property
    def num_sub_blocks(self) -> int:
        return 2 * sum(self.depths)

    def drop_path_rates(self) -> List[float]:
        """Linear ramp 0 -> drop_path_rate over all sub-blocks in depth order"""
        return [float(r) for r in np.linspace(0.0, self.drop_path_rate, self.num_sub_blocks)]

    def sub_block_kinds(self, stage: int) -> Tuple[str, str]:
        """Attention kind in the (spatial slot, channel slot) of a 1-based stage"""
        first = "window" if stage in self.window_stages else "channel"
        second = "channel" if stage in self.channel_stages else "window"
        return first, second

    def stage_grids(self, height: int, width: int) -> List[Tuple[int, int]]:
        grids = []
        h, w = height, width
        for stage in range(NUM_STAGES):
            k, s, p = self.patch_kernels[stage], self.patch_strides[stage], self.patch_pads[stage]
            h, w = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
            if h < 1 or w < 1:
                raise GeometryError(f"input {height}x{width} leaves stage {stage + 1} with an "
                                    f"empty {h}x{w} grid")
            grids.append((h, w))
        return grids

    def stage_windows(self, height: int, width: int) -> List[int]:
        """
        Window side per stage for an input of ``height x width``

        In ``fit`` mode the configured window may only be replaced by ``fit_window``,
        and only when the final-stage grid is exactly ``fit_window`` on a side.
        """
        grids = self.stage_grids(height, width)
        if self.window_mode == "global":
            for h, w in grids:
                if h != w:
                    raise GeometryError(f"global window needs square grids, got {h}x{w}")
            return [h for h, _ in grids]

        base = self.window_size
        if self.window_mode == "fit" and not _tiles(grids, base, clamp=True):
            last_h, last_w = grids[-1]
            if last_h == last_w == self.fit_window and _tiles(grids, last_h, clamp=True):
                logger.warning(f"window {base} does not tile {height}x{width} stage grids "
                               f"{grids}; using the fit window {last_h}")
                base = last_h

        windows = []
        for h, w in grids:
            side = base
            if self.window_mode == "fit" and h == w and h <= base:
                side = h
            if h % side or w % side:
                raise GeometryError(f"grid h={h}, w={w} is not divisible by window s={side} "
                                    f"(input {height}x{width})")
            windows.append(side)
        return windows

    def summary(self) -> Dict[str, Any]:
        return {"name": self.name, "dims": self.stage_dims, "depths": list(self.depths),
                "heads": list(self.num_heads), "ffn": self.ffn_enabled}


def _tiles(grids, side: int, clamp: bool) -> bool:
    for h, w in grids:
        if clamp and h == w and h <= side:
            continue
        if h % side or w % side:
            return False
    return True


def _first_error(exc: ValidationError) -> str:
    error = exc.errors()[0]
    where = ".".join(str(p) for p in error.get("loc", ()))
    return f"{where}: {error['msg']}" if where else error["msg"]


_SCALED_UP = dict(scale_mode="inv_sqrt_P", drop_path_rate=0.4)

PRESETS: Dict[str, Dict[str, Any]] = {
    "tiny": dict(base_dim=96, depths=(1, 1, 3, 1), num_heads=(3, 6, 12, 24), drop_path_rate=0.1),
    "small": dict(base_dim=96, depths=(1, 1, 9, 1), num_heads=(3, 6, 12, 24), drop_path_rate=0.2),
    "base": dict(base_dim=128, depths=(1, 1, 9, 1), num_heads=(4, 8, 16, 32), drop_path_rate=0.4),
    "large": dict(base_dim=192, depths=(1, 1, 9, 1), num_heads=(6, 12, 24, 48), **_SCALED_UP),
    "huge": dict(base_dim=256, depths=(1, 1, 9, 1), num_heads=(8, 16, 32, 64), **_SCALED_UP),
    "giant": dict(base_dim=384, depths=(1, 1, 12, 3), num_heads=(12, 24, 48, 96), **_SCALED_UP),
    "micro": dict(base_dim=32, depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8), window_size=4,
                  num_classes=4, drop_path_rate=0.1),
    "gradcheck_micro": dict(base_dim=16, depths=(1, 1, 1, 1), num_heads=(2, 4, 8, 16), head_dim=8,
                            window_size=2, num_classes=4, in_chans=2, drop_path_rate=0.0,
                            patch_kernels=(3, 2, 2, 2), patch_strides=(1, 2, 2, 2),
                            patch_pads=(1, 0, 0, 0)),
}
PRESETS["tiny_no_ffn"] = dict(PRESETS["tiny"], depths=(2, 2, 11, 2), ffn_enabled=False)
PRESETS["small_no_ffn"] = dict(PRESETS["small"], depths=(2, 2, 28, 2), ffn_enabled=False)
PRESETS["base_no_ffn"] = dict(PRESETS["base"], depths=(2, 2, 28, 2), ffn_enabled=False)
PRESETS["tiny_window_only"] = dict(PRESETS["tiny"], channel_stages=())
PRESETS["tiny_channel_only"] = dict(PRESETS["tiny"], window_stages=())
PRESETS["tiny_window_only_no_ffn"] = dict(PRESETS["tiny_no_ffn"], channel_stages=())
PRESETS["tiny_channel_only_no_ffn"] = dict(PRESETS["tiny_no_ffn"], window_stages=())

# Reported sizes: params in millions, GFLOPs keyed by resolution
REFERENCE_SIZES: Dict[str, Dict[str, Any]] = {
    "tiny": {"params_m": 28.3, "gflops": {224: 4.5}},
    "small": {"params_m": 49.7, "gflops": {224: 8.8}},
    "base": {"params_m": 87.9, "gflops": {224: 15.5, 384: 46.4}},
    "large": {"params_m": 196.8, "gflops": {384: 103.0}},
    "tiny_no_ffn": {"params_m": 25.8, "gflops": {224: 4.5}},
    "small_no_ffn": {"params_m": 46.3, "gflops": {224: 8.7}},
    "base_no_ffn": {"params_m": 81.6, "gflops": {224: 15.2}},
}


def preset_names() -> List[str]:
    return list(PRESETS)


def get_preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'; choose from {', '.join(PRESETS)}")
    return ModelConfig.create(name=name, **PRESETS[name])
