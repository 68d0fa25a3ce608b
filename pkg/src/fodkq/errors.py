"""Exception hierarchy mapped to CLI exit codes."""


class FodkqError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(FodkqError):
    """Bad arguments or malformed configuration."""

    exit_code = 1


class DataError(FodkqError):
    """Missing files, shape mismatches, infeasible sampling budgets."""

    exit_code = 2


class NumericalError(FodkqError):
    """Divergence or other numerical failure inside the solver."""

    exit_code = 3
