#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Reference Oracles - Эталонные реализации

Direct loop-based evaluations of the attention formulas, written without the
tensor engine, used to cross-check the vectorised kernels.
"""

import math
from typing import Tuple

import numpy as np

from app.models.attention import AttentionParams, channel_scale


def _project(x: np.ndarray, params: AttentionParams) -> Tuple[np.ndarray, ...]:
    def apply(w, b):
        y = x @ w.data
        return y if b is None else y + b.data
    return (apply(params.w_q, params.b_q), apply(params.w_k, params.b_k),
            apply(params.w_v, params.b_v))


def _output(y: np.ndarray, params: AttentionParams) -> np.ndarray:
    out = y @ params.w_o.data
    return out if params.b_o is None else out + params.b_o.data


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_mhsa(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    """softmax(Q_i K_iᵀ / sqrt(C_h)) V_i per head, concatenated, then W_o"""
    x = np.asarray(x, dtype=np.float64)
    q, k, v = _project(x, params)
    heads, width = params.num_heads, params.head_dim
    out = np.zeros_like(q)
    for b in range(x.shape[0]):
        for i in range(heads):
            cols = slice(i * width, (i + 1) * width)
            scores = q[b][:, cols] @ k[b][:, cols].T / math.sqrt(width)
            out[b][:, cols] = _softmax_rows(scores) @ v[b][:, cols]
    return _output(out, params)


def reference_window_attention(x: np.ndarray, params: AttentionParams, side: int) -> np.ndarray:
    """Gather each window by explicit indices, attend, scatter back"""
    x = np.asarray(x, dtype=np.float64)
    n, h, w, c = x.shape
    out = np.zeros_like(x)
    for sample in range(n):
        for top in range(0, h, side):
            for left in range(0, w, side):
                patch = x[sample, top:top + side, left:left + side].reshape(1, side * side, c)
                result = reference_mhsa(patch, params)
                out[sample, top:top + side, left:left + side] = result.reshape(side, side, c)
    return out


def reference_channel_attention(x: np.ndarray, params: AttentionParams,
                                scale_mode: str = "inv_sqrt_Cg") -> np.ndarray:
    """
    Per group i: A_i = softmax(Q_iᵀ K_i · scale) over channel tokens, and the
    group output is (A_i V_iᵀ)ᵀ.
    """
    x = np.asarray(x, dtype=np.float64)
    q, k, v = _project(x, params)
    groups, width = params.num_heads, params.head_dim
    factor = channel_scale(scale_mode, x.shape[1], width)
    out = np.zeros_like(q)
    for b in range(x.shape[0]):
        for i in range(groups):
            cols = slice(i * width, (i + 1) * width)
            q_i, k_i, v_i = q[b][:, cols], k[b][:, cols], v[b][:, cols]
            weights = _softmax_rows(q_i.T @ k_i * factor)
            out[b][:, cols] = (weights @ v_i.T).T
    return _output(out, params)


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray,
                              test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Accuracy of a nearest-class-mean classifier on flattened images"""
    train_flat = train_x.reshape(train_x.shape[0], -1).astype(np.float64)
    test_flat = test_x.reshape(test_x.shape[0], -1).astype(np.float64)
    classes = np.unique(train_y)
    centroids = np.stack([train_flat[train_y == c].mean(axis=0) for c in classes])
    distances = ((test_flat[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    predictions = classes[distances.argmin(axis=1)]
    return float((predictions == test_y).mean())
