#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Error Hierarchy - Иерархия ошибок
Exceptions raised by the tensor engine, the model and the services
"""


class DavitError(Exception):
    """Base class for all library errors"""
    pass


class ConfigError(DavitError, ValueError):
    """Invalid or contradictory configuration"""
    pass


class DimensionError(DavitError, ValueError):
    """Shape mismatch between operands"""

    @classmethod
    def mismatch(cls, op: str, a_shape, b_shape) -> "DimensionError":
        return cls(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")


class GeometryError(DimensionError):
    """Spatial grid cannot be tiled or a convolution output would be empty"""
    pass


class NumericError(DavitError, ArithmeticError):
    """Non-finite value produced or consumed"""
    pass


class TrainingDivergedError(NumericError):
    """Training produced a non-finite loss"""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {message}" if message else ""))


class ContractError(DavitError, RuntimeError):
    """API used outside its contract"""
    pass


class FormatError(DavitError, ValueError):
    """Malformed container, checkpoint or image file"""
    pass
