#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Toy Dataset - Игрушечный набор данных
Procedural four-class image patterns for desk-scale training
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from app.core.errors import ConfigError
from app.core.rng import Rng

logger = logging.getLogger(__name__)

CLASS_NAMES = ("horizontal_stripes", "vertical_stripes", "checkerboard", "centered_blob")


@dataclass
class ToySpec:
    """
    Toy dataset description
    Описание игрушечного набора данных
    """
    image_size: int = 32
    num_classes: int = 4
    channels: int = 3
    noise: float = 0.1
    stripe_width: int = 2
    train_per_class: int = 64
    test_per_class: int = 16
    seed: int = 0

    def validate(self) -> "ToySpec":
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must lie in 1..{len(CLASS_NAMES)}, got {self.num_classes}")
        if self.image_size < 2 or self.channels < 1 or self.stripe_width < 1:
            raise ConfigError("image_size must be >= 2, channels and stripe_width >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise amplitude must be >= 0, got {self.noise}")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigError("need at least one training image per class")
        return self


@dataclass
class ToyDataset:
    spec: ToySpec
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: Tuple[str, ...] = field(default=CLASS_NAMES)

    def class_counts(self) -> Dict[str, Dict[int, int]]:
        return {
            split: {int(c): int((labels == c).sum()) for c in range(self.spec.num_classes)}
            for split, labels in (("train", self.train_labels), ("test", self.test_labels))
        }


def class_pattern(label: int, spec: ToySpec) -> np.ndarray:
    """Noiseless ``[H, W]`` pattern of one class, values in [0, 1]"""
    size, width = spec.image_size, spec.stripe_width
    y, x = np.mgrid[0:size, 0:size]
    if label == 0:
        pattern = (y // width) % 2
    elif label == 1:
        pattern = (x // width) % 2
    elif label == 2:
        pattern = (y // width + x // width) % 2
    elif label == 3:
        center = (size - 1) / 2.0
        sigma = size / 6.0
        pattern = np.exp(-((y - center) ** 2 + (x - center) ** 2) / (2.0 * sigma ** 2))
    else:
        raise ConfigError(f"no pattern for class {label}")
    return pattern.astype(np.float64)


def _split(spec: ToySpec, per_class: int, rng: Rng, dtype) -> Tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    images = np.empty((per_class * spec.num_classes, spec.channels, size, size), dtype=np.float64)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), per_class)
    for index, label in enumerate(labels):
        base = class_pattern(int(label), spec)
        noise = rng.normal((spec.channels, size, size), std=spec.noise) if spec.noise else 0.0
        images[index] = np.clip(base[None] + noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return images[order].astype(dtype), labels[order]


def generate_toy_dataset(spec: ToySpec, dtype=np.float32) -> ToyDataset:
    """Balanced, seeded train/test split; identical specs give identical arrays"""
    spec.validate()
    rng = Rng(spec.seed)
    train_images, train_labels = _split(spec, spec.train_per_class, rng.spawn(0), dtype)
    test_images, test_labels = _split(spec, spec.test_per_class, rng.spawn(1), dtype)
    logger.debug(f"toy dataset: {train_labels.size} train / {test_labels.size} test images, "
                 f"{spec.image_size}px, noise {spec.noise}")
    return ToyDataset(spec, train_images, train_labels, test_images, test_labels,
                      CLASS_NAMES[:spec.num_classes])
