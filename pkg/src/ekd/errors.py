"""Exception types shared across the package.

Every error raised on a documented failure path derives from EkdError so
callers (and the command line front end) can distinguish expected validation
failures from genuine bugs.
"""

from __future__ import annotations

__all__ = [
    "EkdError",
    "ShapeError",
    "NumericError",
    "ContractError",
    "ConfigError",
    "VocabError",
    "LengthError",
    "DataError",
    "HierarchyError",
    "CheckpointError",
    "IntegrityError",
]


class EkdError(Exception):
    """Base class for all package errors."""


class ShapeError(EkdError):
    """Operands have incompatible shapes. The message names both shapes."""


class NumericError(EkdError):
    """Non-finite values where finite ones are required."""


class ContractError(EkdError):
    """An argument violates a documented precondition."""


class ConfigError(EkdError):
    """A configuration value is missing, malformed, or out of range."""


class VocabError(EkdError):
    """A token id falls outside the model or vocabulary range."""


class LengthError(EkdError):
    """A sequence exceeds a configured length budget."""


class DataError(EkdError):
    """A corpus or batch is degenerate (empty, misaligned, all padding)."""


class HierarchyError(EkdError):
    """A teacher chain is not strictly capacity-ascending."""


class CheckpointError(EkdError):
    """A checkpoint file is malformed (bad magic, version, or framing)."""


class IntegrityError(EkdError):
    """A checkpoint fails length or consistency checks (truncated, trailing bytes)."""
