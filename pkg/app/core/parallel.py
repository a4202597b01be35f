#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Intra-op parallelism - Параллелизм внутри операций
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)

_num_threads = 1


def set_num_threads(n: int) -> int:
    """Cap worker threads; 0 means one per CPU"""
    global _num_threads
    if n < 0:
        raise ValueError(f"thread count must be >= 0, got {n}")
    _num_threads = n if n > 0 else (os.cpu_count() or 1)
    logger.debug(f"intra-op threads set to {_num_threads}")
    return _num_threads


def get_num_threads() -> int:
    return _num_threads


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Map preserving input order; each result is produced exactly once"""
    if _num_threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(_num_threads, len(items))) as pool:
        return list(pool.map(fn, items))
