"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class MetasolveError(Exception):
    exit_code = 1


class ValidationError(MetasolveError, ValueError):
    """Bad input, bad config or violated precondition."""

    exit_code = 2


class DimensionError(ValidationError):
    pass


class CapacityError(ValidationError):
    pass


class FormatError(MetasolveError):
    """Malformed EPDS/MSCK file. ``offset`` is the byte where parsing failed."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(MetasolveError, ArithmeticError):
    exit_code = 4


class DomainError(NumericalError):
    pass


class SingularMatrixError(NumericalError):
    def __init__(self, pivot: int, size: int):
        super().__init__(
            f"matrix of size {size}x{size} is not positive definite: "
            f"factorization failed at pivot {pivot}"
        )
        self.pivot = pivot
        self.size = size


class GradcheckError(MetasolveError):
    exit_code = 5
