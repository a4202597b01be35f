#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tensor Container Codec - Формат контейнера тензоров

Layout (all little-endian)::

    b"DAVT" | u16 version | u8 dtype code | u8 rank | rank x u64 dims | payload

dtype code 0 is float32, 1 is float64; the payload is the row-major data.
"""

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.core.errors import FormatError
from app.core.tensor import Tensor

MAGIC = b"DAVT"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHBB")


def encode_tensor(tensor: Union[Tensor, np.ndarray]) -> bytes:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if data.dtype not in DTYPE_CODES:
        raise FormatError(f"cannot encode dtype {data.dtype}")
    code = DTYPE_CODES[data.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, data.ndim)
    dims = struct.pack(f"<{data.ndim}Q", *data.shape)
    payload = np.ascontiguousarray(data, dtype=CODE_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one record starting at ``offset``; returns the tensor and the end offset"""
    if len(buffer) - offset < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, code, rank = _HEADER.unpack_from(buffer, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}, expected {VERSION}")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    offset += _HEADER.size
    dims_size = 8 * rank
    if len(buffer) - offset < dims_size:
        raise FormatError("truncated tensor dims")
    shape = struct.unpack_from(f"<{rank}Q", buffer, offset)
    offset += dims_size
    if any(d < 1 for d in shape):
        raise FormatError(f"non-positive dimension in {shape}")
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buffer) - offset < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buffer) - offset}")
    data = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset).reshape(shape)
    native = np.float32 if code == 0 else np.float64
    return Tensor(data.astype(native)), offset + nbytes


def save_tensor(tensor: Union[Tensor, np.ndarray], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))


def load_tensor(path: Union[str, Path]) -> Tensor:
    buffer = Path(path).read_bytes()
    tensor, end = decode_tensor(buffer)
    if end != len(buffer):
        raise FormatError(f"{len(buffer) - end} trailing bytes after tensor record")
    return tensor
