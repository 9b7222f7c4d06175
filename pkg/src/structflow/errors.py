"""Exception types shared across the package.

Each error carries the process exit code the command-line tools use for it.
"""


class StructFlowError(Exception):
    exit_code = 1


class DataError(StructFlowError):
    """Input rasters are malformed, mismatched or incomplete."""

    exit_code = 2


class StabilityError(StructFlowError):
    """The upwind propagator would violate its CFL bound."""

    exit_code = 3

    def __init__(self, message, magnitude=None):
        super().__init__(message)
        self.magnitude = magnitude


class ConfigurationError(StructFlowError, ValueError):
    exit_code = 4
