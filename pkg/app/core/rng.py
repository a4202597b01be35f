#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Seeded Random Numbers - Детерминированный генератор
Counter-based generator shared by initialisation, stochastic depth and data.

The stream comes from numpy's Philox-4x64 bit generator keyed by the 64-bit
seed (10 rounds, multipliers 0xD2E7470EE14C6C93 / 0xCA5A826395121157, Weyl
increments 0x9E3779B97F4A7C15 / 0xBB67AE8584CAA73B). Philox is counter based,
so a (seed, counter) pair reproduces the same words on every platform.
"""

from typing import Any, Dict, Optional

import numpy as np

SEED_MASK = (1 << 64) - 1


class Rng:
    """Seeded random stream"""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & SEED_MASK
        self._bits = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bits)

    @property
    def state(self) -> Dict[str, Any]:
        return self._bits.state

    @state.setter
    def state(self, value: Dict[str, Any]):
        self._bits.state = value

    def spawn(self, index: int) -> "Rng":
        """Independent child stream derived from this seed"""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + index + 1) & SEED_MASK)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        return np.asarray(self._gen.uniform(low, high, size), dtype=dtype)

    def normal(self, size=None, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return np.asarray(self._gen.standard_normal(size) * std, dtype=dtype)

    def truncated_normal(self, size, std: float = 0.02, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
        """Normal samples redrawn until they fall inside ±bound·std"""
        out = self._gen.standard_normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return np.asarray(out * std, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: Optional[int] = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)
