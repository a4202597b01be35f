#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Feature Export - Экспорт карт признаков

Reads input images (tensor container or binary PPM) and writes per-channel
stage feature maps as 8-bit binary PGM files.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.core.container import MAGIC as CONTAINER_MAGIC
from app.core.container import load_tensor
from app.core.errors import ConfigError, DimensionError, FormatError
from app.core.tensor import Tensor
from app.models.config import NUM_STAGES
from app.models.davit import DaViT
from app.models.layers import Mode

logger = logging.getLogger(__name__)


def read_image(path: Union[str, Path], dtype=np.float32) -> np.ndarray:
    """
    Load an image file as a ``[N, C, H, W]`` batch.

    Tensor containers may hold ``[C, H, W]`` or ``[N, C, H, W]``; PPM/PGM
    pixels are scaled to [0, 1].
    """
    path = Path(path)
    try:
        head = path.read_bytes()[:len(CONTAINER_MAGIC)]
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from None
    if head == CONTAINER_MAGIC:
        array = load_tensor(path).data.astype(dtype)
        if array.ndim == 3:
            array = array[None]
        if array.ndim != 4:
            raise DimensionError(f"{path}: expected [C,H,W] or [N,C,H,W], got {array.shape}")
        return array

    try:
        with Image.open(path) as image:
            if image.format not in ("PPM", "PGM"):
                raise FormatError(f"{path}: unsupported image format {image.format}")
            pixels = np.asarray(image, dtype=np.float64)
    except UnidentifiedImageError:
        raise FormatError(f"{path}: neither a tensor container nor a PPM image") from None
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    scale = 65535.0 if pixels.max(initial=0) > 255 else 255.0
    return (pixels / scale).transpose(2, 0, 1)[None].astype(dtype)


def normalize_channel(channel: np.ndarray) -> np.ndarray:
    """Min-max to 0..255; a constant channel maps to all zeros"""
    channel = np.asarray(channel, dtype=np.float64)
    low, high = channel.min(), channel.max()
    if high <= low:
        return np.zeros(channel.shape, dtype=np.uint8)
    return np.rint((channel - low) / (high - low) * 255.0).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """Binary (P5) 8-bit grayscale"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")
    return path


def top_k_channels(weights: np.ndarray, out_channel: int, k: int) -> List[Tuple[int, float]]:
    """
    Channels attended by ``out_channel`` ranked by channel-attention score.

    ``weights`` is ``[N, N_g, C_g, C_g]``; only channels of ``out_channel``'s
    group can be attended. Scores come from the first sample.
    """
    _, groups, group_dim, _ = weights.shape
    dim = groups * group_dim
    if not 0 <= out_channel < dim:
        raise ConfigError(f"output channel {out_channel} out of range 0..{dim - 1}")
    if not 1 <= k <= group_dim:
        raise ConfigError(f"top-k must lie in 1..{group_dim} (channel group width), got {k}")
    group, row = divmod(out_channel, group_dim)
    scores = weights[0, group, row]
    ranked = sorted(range(group_dim), key=lambda j: (-scores[j], j))[:k]
    return [(group * group_dim + j, float(scores[j])) for j in ranked]


def export_feature_maps(model: DaViT, image: Union[np.ndarray, Tensor], stage: int,
                        out_dir: Union[str, Path], channels: Optional[Sequence[int]] = None,
                        top_k: Optional[int] = None, out_channel: int = 0) -> List[Path]:
    """
    Write stage ``stage`` feature maps of the first image as PGM files.

    Select channels either explicitly or as the ``top_k`` channels that
    ``out_channel`` attends to in the stage's last channel attention layer.
    Files are returned in selection order (descending score for top-k).
    """
    if not 1 <= stage <= NUM_STAGES:
        raise ConfigError(f"stage must lie in 1..{NUM_STAGES}, got {stage}")
    if (channels is None) == (top_k is None):
        raise ConfigError("choose exactly one of an explicit channel list or top-k")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 3:
        data = data[None]
    x = Tensor(data[:1], dtype=model.dtype)

    layer = model.channel_attention_layer(stage) if top_k is not None else None
    if layer is not None:
        layer.record_attention = True
    try:
        features = model.forward_features(x, Mode.EVAL)[stage - 1].data[0]
    finally:
        if layer is not None:
            layer.record_attention = False
    dim = features.shape[-1]

    out_dir = Path(out_dir)
    written = []
    if top_k is not None:
        ranked = top_k_channels(layer.last_attention, out_channel, top_k)
        for rank, (channel, score) in enumerate(ranked, start=1):
            path = out_dir / f"stage{stage}_rank{rank:02d}_ch{channel:04d}.pgm"
            written.append(write_pgm(normalize_channel(features[:, :, channel]), path))
            logger.debug(f"rank {rank}: channel {channel} score {score:.4f}")
    else:
        for channel in channels:
            if not 0 <= channel < dim:
                raise ConfigError(f"channel {channel} out of range 0..{dim - 1} for stage {stage}")
        for channel in channels:
            path = out_dir / f"stage{stage}_ch{channel:04d}.pgm"
            written.append(write_pgm(normalize_channel(features[:, :, channel]), path))
    logger.info(f"exported {len(written)} stage-{stage} feature maps "
                f"({features.shape[0]}x{features.shape[1]}) to {out_dir}")
    return written
