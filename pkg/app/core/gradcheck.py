#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gradient Check - Проверка градиентов
Tape gradients against central finite differences
"""

import logging
from typing import Callable, Optional

import numpy as np

from app.core.errors import ContractError
from app.core.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Worst relative error between tape and central-difference gradients of ``f`` at ``x``.

    ``f`` must map a tensor to a scalar tensor. ``max_coords`` limits the check
    to a seeded random subset of coordinates for large inputs.
    """
    if x.dtype != np.float64:
        raise ContractError(f"grad_check needs a float64 input, got {x.dtype}")

    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, output shape {out.shape}")
    tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))

    numeric = np.zeros(coords.size)
    for slot, index in enumerate(coords):
        plus = flat.copy()
        minus = flat.copy()
        plus[index] += h
        minus[index] -= h
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        numeric[slot] = (f_plus - f_minus) / (2.0 * h)

    worst = float(relative_error(analytic.reshape(-1)[coords], numeric).max(initial=0.0))
    logger.debug(f"grad_check over {coords.size} coordinates: max rel err {worst:.3e}")
    return worst
