"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
first token of its one-line error message and maps it to an exit code.
"""


class MifError(Exception):
    category = "error"
    exit_code = 1


class ValidationError(MifError, ValueError):
    category = "validation"
    exit_code = 2


class ConfigurationError(MifError, ValueError):
    category = "config"
    exit_code = 3


class FormatError(MifError, OSError):
    """Malformed or truncated file on disk."""

    category = "io"
    exit_code = 4


class ComputationError(MifError, ArithmeticError):
    category = "computation"
    exit_code = 5


class NumericError(ComputationError):
    """Non-finite values appeared inside a network or a loss."""

    category = "numeric"
    exit_code = 6


class BundleError(FormatError):
    category = "bundle"
    exit_code = 7
