"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InputError -> 3, NumericError -> 4,
IdentificationError -> 5 (usage errors are raised by argparse itself, -> 2).
"""


class MisteriError(Exception):
    """Base class for all errors raised by this package."""


class InputError(MisteriError):
    """Malformed user input: missing files, unmapped columns, bad cells."""


class NumericError(MisteriError):
    """Numerical failure: overflow, divergence, singular systems."""


class VarianceOverflowError(NumericError):
    """Variance model exponent left the representable range."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class IdentificationError(MisteriError):
    """The data cannot identify the requested quantity (collinearity,
    constant variance, weak or degenerate instruments)."""
