#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Differentiable Operations - Дифференцируемые операции

Every function takes and returns `Tensor` objects, evaluates its forward value
with numpy and, when a tape is active, records the matching backward rule.
Only the operations the backbone needs are provided.
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from einops import rearrange as _einops_rearrange
from numpy.lib.stride_tricks import sliding_window_view

from app.core.errors import ContractError, DimensionError, GeometryError, NumericError
from app.core.parallel import parallel_map
from app.core.tensor import Tensor, as_tensor, make_result

Axis = Union[None, int, Tuple[int, ...]]

LAYER_NORM_EPS = 1e-5

_erf = np.vectorize(math.erf, otypes=[np.float64])


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError.mismatch(op, a.shape, b.shape) from None


def _check_nan(op: str, x: Tensor):
    if np.isnan(x.data).any():
        raise NumericError(f"{op}: NaN in input")


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return make_result("mul", a_data * b_data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return make_result("scale", x.data * np.asarray(factor, dtype=x.dtype), (x,), backward)


# ------------------------------------------------------------- contractions
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError.mismatch("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError.mismatch("matmul", a.shape, b.shape) from None
    a_data, b_data = a.data, b.data

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b_data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return make_result("matmul", np.matmul(a_data, b_data), (a, b), backward)


# ---------------------------------------------------------------- geometry
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError.mismatch("reshape", x.shape, shape) from None
    source = x.shape

    def backward(g):
        return (g.reshape(source),)

    return make_result("reshape", out, (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result("permute", np.transpose(x.data, axes), (x,), backward)


def transpose(x: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return permute(x, axes)


def rearrange(x: Tensor, pattern: str, **sizes: int) -> Tensor:
    """
    einops-style axis rearrangement with an exact inverse as backward rule.

    ``sizes`` must name enough axes for both directions of the pattern.
    """
    left, right = (side.strip() for side in pattern.split("->"))
    inverse = f"{right} -> {left}"
    try:
        out = _einops_rearrange(x.data, pattern, **sizes)
    except Exception as exc:
        raise DimensionError(f"rearrange '{pattern}' failed for shape {x.shape}: {exc}") from None

    def backward(g):
        return (_einops_rearrange(g, inverse, **sizes),)

    return make_result("rearrange", np.ascontiguousarray(out), (x,), backward)


# -------------------------------------------------------------- reductions
def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    source = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, source).copy(),)

    return make_result("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    source = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, source).copy(),)

    return make_result("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N, H, W, C] -> [N, C]``"""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,H,W,C], got {x.shape}")
    return mean(x, axis=(1, 2))


# ------------------------------------------------------------ nonlinearities
def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    _check_nan("softmax", x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last (channel) axis, then apply the affine map"""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError.mismatch("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gamma_data = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma_data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result("layer_norm", xhat * gamma_data + beta.data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x)"""
    data = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + _erf(data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * data * data) / math.sqrt(2.0 * math.pi)
    dtype = x.dtype

    def backward(g):
        return ((g * (cdf + data * pdf)).astype(dtype),)

    return make_result("gelu", (data * cdf).astype(dtype), (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits [N, K]``"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError.mismatch("cross_entropy", logits.shape, labels.shape)
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    _check_nan("cross_entropy", logits)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return make_result("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ------------------------------------------------------------- convolution
def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """
    Direct 2-D convolution over ``[N, C_in, H, W]`` with zero padding.

    ``groups`` is 1 (dense) or ``C_in`` (depthwise, weights ``[C, 1, kh, kw]``).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError.mismatch("conv2d", x.shape, w.shape)
    n, c_in, height, width = x.shape
    c_out, c_per_group, kh, kw = w.shape
    depthwise = groups != 1
    if depthwise:
        if groups != c_in or c_out != c_in or c_per_group != 1:
            raise DimensionError(f"conv2d depthwise needs weights [{c_in},1,kh,kw], got {w.shape}")
    elif c_per_group != c_in:
        raise DimensionError.mismatch("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (c_out,):
        raise DimensionError.mismatch("conv2d bias", w.shape, b.shape)
    if stride < 1 or pad < 0:
        raise GeometryError(f"conv2d stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    out_h = conv_output_size(height, kh, stride, pad)
    out_w = conv_output_size(width, kw, stride, pad)
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"conv2d output would be {out_h}x{out_w} for input {height}x{width}, "
                            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [N, C, H', W', kh, kw] strided view, no copy
    cols = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    weight = w.data

    def forward_sample(i: int) -> np.ndarray:
        if depthwise:
            return np.einsum("chwij,cij->chw", cols[i], weight[:, 0])
        return np.einsum("chwij,ocij->ohw", cols[i], weight, optimize=True)

    out = np.stack(parallel_map(forward_sample, list(range(n))), axis=0)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        if depthwise:
            grad_w = np.einsum("nchw,nchwij->cij", g, cols)[:, None]
        else:
            grad_w = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        grad_padded = np.zeros_like(padded)
        span_h = stride * (out_h - 1) + 1
        span_w = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                if depthwise:
                    contrib = g * weight[:, 0, i, j][None, :, None, None]
                else:
                    contrib = np.einsum("nohw,oc->nchw", g, weight[:, :, i, j])
                grad_padded[:, :, i:i + span_h:stride, j:j + span_w:stride] += contrib
        grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
        grad_b = g.sum(axis=(0, 2, 3)) if b is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, w) if b is None else (x, w, b)
    return make_result("conv2d", out.astype(x.dtype, copy=False), inputs, backward)
