"""Exception taxonomy shared across the package.

Callers can distinguish bad arguments (ParameterError), numerical failures
mid-computation (NumericError), broken internal contracts such as stale
caches or unnormalized weights (ContractViolation), and malformed input
files (ParseError).
"""


class FedHftError(Exception):
    """Base class for all package errors."""


class ParameterError(FedHftError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(FedHftError, ArithmeticError):
    """A computation produced or encountered non-finite / divergent values."""


class ContractViolation(FedHftError, RuntimeError):
    """An internal invariant between cooperating calls was broken."""


class ParseError(FedHftError, ValueError):
    """An input file could not be parsed; message carries location info."""
