"""Exception types shared across the package.

ValidationError covers bad user input (files, configs, parameter values)
and maps to CLI exit code 2. Everything else that escapes is treated as
a runtime failure (exit code 1).
"""


class FedFewError(Exception):
    pass


class ValidationError(FedFewError):
    """Invalid input data or configuration."""


class AllocationError(ValidationError):
    """Labeled-data quota cannot be satisfied by the client pools."""
