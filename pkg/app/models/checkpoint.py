#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Checkpoint Codec - Сохранение и загрузка контрольных точек

Layout (little-endian)::

    b"DAVTCKPT" | u16 version | u32 manifest length | JSON manifest
    then per tensor: u16 name length | name | u64 record length | container record
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from app.core.container import decode_tensor, encode_tensor
from app.core.errors import ConfigError, DimensionError, FormatError
from app.models.config import ModelConfig
from app.models.davit import DaViT

logger = logging.getLogger(__name__)

MAGIC = b"DAVTCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sHI")
_NAME_LEN = struct.Struct("<H")
_RECORD_LEN = struct.Struct("<Q")


def save_checkpoint(model: DaViT, path: Union[str, Path],
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = list(model.named_parameters())
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": model.seed,
        "dtype": str(model.dtype),
        "config": model.config.model_dump(mode="json"),
        "tensors": [name for name, _ in params],
    }
    if extra:
        manifest["extra"] = extra
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")

    chunks = [_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes)), manifest_bytes]
    for name, param in params:
        encoded_name = name.encode("utf-8")
        record = encode_tensor(param)
        chunks += [_NAME_LEN.pack(len(encoded_name)), encoded_name,
                   _RECORD_LEN.pack(len(record)), record]
    path.write_bytes(b"".join(chunks))
    logger.info(f"checkpoint saved to {path} ({len(params)} tensors)")
    return path


def read_checkpoint(path: Union[str, Path]):
    """Parse a checkpoint into its manifest and named arrays"""
    buffer = Path(path).read_bytes()
    if len(buffer) < _PREAMBLE.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, manifest_len = _PREAMBLE.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    offset = _PREAMBLE.size
    if len(buffer) - offset < manifest_len:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buffer[offset:offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from None
    offset += manifest_len

    arrays: Dict[str, np.ndarray] = {}
    for expected in manifest.get("tensors", []):
        if len(buffer) - offset < _NAME_LEN.size:
            raise FormatError(f"{path}: truncated before tensor '{expected}'")
        (name_len,) = _NAME_LEN.unpack_from(buffer, offset)
        offset += _NAME_LEN.size
        name = buffer[offset:offset + name_len].decode("utf-8", errors="replace")
        offset += name_len
        if name != expected:
            raise FormatError(f"{path}: expected tensor '{expected}', found '{name}'")
        if len(buffer) - offset < _RECORD_LEN.size:
            raise FormatError(f"{path}: truncated record length for '{name}'")
        (record_len,) = _RECORD_LEN.unpack_from(buffer, offset)
        offset += _RECORD_LEN.size
        if len(buffer) - offset < record_len:
            raise FormatError(f"{path}: truncated tensor '{name}'")
        tensor, end = decode_tensor(buffer[offset:offset + record_len])
        if end != record_len:
            raise FormatError(f"{path}: record length mismatch for '{name}'")
        arrays[name] = tensor.data
        offset += record_len
    if offset != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - offset} trailing bytes")
    return manifest, arrays


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> DaViT:
    """
    Rebuild the model stored at ``path``.

    With ``config`` given, the stored tensors must fit that config exactly;
    otherwise the manifest's own config is used.
    """
    manifest, arrays = read_checkpoint(path)
    try:
        stored_config = ModelConfig.create(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest has no usable config ({exc})") from None
    except ConfigError as exc:
        raise FormatError(f"{path}: stored config is invalid: {exc}") from None
    target = config or stored_config
    dtype = np.dtype(manifest.get("dtype", "float32"))
    model = DaViT(target, seed=int(manifest.get("seed", 0)), dtype=dtype)

    params = dict(model.named_parameters())
    missing = [name for name in params if name not in arrays]
    unexpected = [name for name in arrays if name not in params]
    if missing or unexpected:
        raise DimensionError(f"checkpoint does not match config '{target.name}': "
                             f"{len(missing)} missing tensors (e.g. {missing[:2]}), "
                             f"{len(unexpected)} unexpected (e.g. {unexpected[:2]})")
    for name, param in params.items():
        array = arrays[name]
        if array.shape != param.shape:
            raise DimensionError(f"{name}: checkpoint shape {array.shape} does not match "
                                 f"config shape {param.shape}")
        param.assign(array)
    logger.info(f"checkpoint loaded from {path} ({len(params)} tensors)")
    return model
