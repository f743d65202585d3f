"""Exception hierarchy shared by every larvseg module.

The CLI maps each subclass to its own exit code, so new failure modes
should subclass the closest existing error rather than ``LarvSegError``.
"""


class LarvSegError(Exception):
    """Base class for all library errors."""


class DimensionError(LarvSegError, ValueError):
    """Operand shapes do not agree."""


class DomainError(LarvSegError, ArithmeticError):
    """Numeric domain violation (division by zero, log of non-positive, overflow)."""


class ContractError(LarvSegError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(LarvSegError):
    """A serialized file is corrupt, truncated or has the wrong magic."""


class ConfigError(LarvSegError):
    """A run configuration is malformed or names unknown keys."""


class GenerationError(LarvSegError):
    """Synthetic data cannot be generated under the requested constraints."""


class ColdStartError(LarvSegError):
    """A memory bank slot is empty; the caller must skip this category."""


class NaNAbort(LarvSegError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
