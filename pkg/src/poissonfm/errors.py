"""Exception hierarchy shared across the package."""


class PfmError(Exception):
    """Base class for all poissonfm errors."""


class DomainError(PfmError, ValueError):
    """An argument violates a mathematical domain constraint."""


class DataFormatError(PfmError, ValueError):
    """A dataset, response, or config file is malformed.

    Carries the offending line number when one is known.
    """

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class CheckpointError(PfmError, ValueError):
    """A checkpoint file is unreadable, truncated, or from a newer version."""


class NumericalError(PfmError, ArithmeticError):
    """A numerical invariant was broken during fitting or optimization."""
