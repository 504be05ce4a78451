"""Exception hierarchy shared across the package.

Library code raises these and never exits; the CLI maps them to exit codes
(2 usage/policy, 3 I/O or data format, 4 numeric).
"""


class SafemergeError(Exception):
    """Base class for all errors raised by this package."""


class PolicyError(SafemergeError):
    """Invalid policy, configuration, or argument combination."""


class DimensionError(SafemergeError):
    """Operands with incompatible shapes or ranks."""


class PairingError(SafemergeError):
    """Tensors or files that must come in matched pairs do not line up."""


class MissingKeyError(SafemergeError):
    """A required layer key is absent from a source."""

    def __init__(self, message: str, keys: tuple[str, ...] = ()):
        super().__init__(message)
        self.keys = tuple(keys)


class FormatError(SafemergeError):
    """Malformed or unsupported file content."""


class NumericError(SafemergeError):
    """Non-finite values where finite ones are required."""


class DegenerateSubspaceError(SafemergeError):
    """The alignment matrix is zero, so the subspace operator is undefined."""
