"""Exception hierarchy.

The CLI maps ``FormatError`` to exit code 3 and ``NumericError`` to exit
code 4, so every failure raised by the library derives from one of them.
"""

from __future__ import annotations


class ProtosegError(Exception):
    """Base class for all library errors."""


class FormatError(ProtosegError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = None if path is None else str(path)
        self.offset = offset
        super().__init__(message)

    def __str__(self) -> str:
        msg = super().__str__()
        where = []
        if self.path is not None:
            where.append(f"file={self.path}")
        if self.offset is not None:
            where.append(f"offset={self.offset}")
        return f"{msg} ({', '.join(where)})" if where else msg


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


class DimensionError(FormatError):
    """Feature dimensions, row counts or class maps disagree."""


class ManifestError(FormatError):
    pass


class NumericError(ProtosegError, ArithmeticError):
    """A computation could not produce a valid result."""


class EmptySelectionError(NumericError):
    pass


class ZeroNormPatchError(NumericError):
    pass


class ZeroNormAverageError(NumericError):
    pass


class ConvergenceError(NumericError):
    def __init__(self, message: str, grad_norm: float = float("nan"), iterations: int = 0):
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(f"{message} (iterations={iterations}, grad_sup_norm={grad_norm:.3e})")


class InfeasibleConfigError(NumericError):
    pass
