"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class DtnmtError(Exception):
    exit_code = 1


class ContractError(DtnmtError, ValueError):
    """A precondition of an operation was violated."""

    exit_code = 1


class NumericError(DtnmtError, ArithmeticError):
    """NaN/Inf showed up where finite values are required."""

    exit_code = 2


class MissingArtifact(DtnmtError, FileNotFoundError):
    exit_code = 3


class UndefinedDelta(DtnmtError, ZeroDivisionError):
    """Relative degradation requested against a zero clean score."""

    exit_code = 1
