#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tensor and Gradient Tape - Тензор и лента градиентов

Dense row-major float arrays (numpy backed) plus a reverse-mode tape. Ops
executed while a `Tape` is active record a backward rule for every output
that depends on a tensor with ``requires_grad``; `Tape.backward` replays the
records in exact reverse order and accumulates gradients in recording order.
"""

import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("davit_active_tape", default=None)


class Tensor:
    """
    Dense float tensor
    Плотный тензор с плавающей точкой
    """

    __array_priority__ = 1000

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str = ""):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype not in FLOAT_DTYPES:
            array = array.astype(np.float32)
        if array.dtype not in FLOAT_DTYPES:
            raise ContractError(f"unsupported dtype {array.dtype}; use float32 or float64")
        if array.ndim == 0:
            array = array.reshape(())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._produced = False

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def assign(self, data: np.ndarray):
        """Replace leaf data (optimizer updates); shape and dtype must not change"""
        data = np.asarray(data, dtype=self.dtype)
        if data.shape != self.shape:
            raise DimensionError.mismatch("assign", self.shape, data.shape)
        self.data = data

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        from app.core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from app.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from app.core import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from app.core import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from app.core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from app.core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from app.core import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from app.core import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


@dataclass
class Tape:
    """
    Reverse-mode gradient tape
    Лента для обратного распространения

    Usage::

        with Tape() as tape:
            loss = f(x)
        grads = tape.backward(loss)
    """

    entries: List[TapeEntry] = field(default_factory=list)
    _leaves: Dict[int, Tensor] = field(default_factory=dict)
    _consumed: bool = False
    _token: object = None

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise ContractError("tape already consumed by backward(); record a new one")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardRule):
        if self._consumed:
            raise ContractError("cannot record on a consumed tape")
        for tensor in inputs:
            if tensor.requires_grad and not tensor._produced:
                self._leaves.setdefault(id(tensor), tensor)
        output._produced = True
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagate d(loss)/d(leaf) and store it on each leaf's ``grad``.

        Returns the leaf gradients keyed by ``id(leaf)``.
        """
        if self._consumed:
            raise ContractError("backward() already ran on this tape; rerun the forward pass")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            input_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise DimensionError(
                        f"{entry.op} backward produced grad {grad.shape} for input {tensor.shape}")
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        leaf_grads: Dict[int, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            grad = grads.get(key)
            if grad is None:
                grad = np.zeros_like(leaf.data)
            grad = grad.astype(leaf.dtype, copy=False)
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad
            leaf_grads[key] = grad
        logger.debug(f"backward over {len(self.entries)} ops, {len(leaf_grads)} leaves")
        return leaf_grads


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardRule) -> Tensor:
    """Wrap an op's forward value and record it on the active tape"""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.data.flags.writeable = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out
