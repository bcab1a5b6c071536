"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for data problems, 4 for numeric failures.
"""


class ClusterFlowError(Exception):
    exit_code = 1


class ConfigError(ClusterFlowError, ValueError):
    exit_code = 2


class DataError(ClusterFlowError, ValueError):
    exit_code = 3


class NumericError(ClusterFlowError, ArithmeticError):
    exit_code = 4


class ParameterError(ConfigError):
    """An algorithm parameter is outside its admissible set."""


class InfeasibleError(ConfigError):
    """The requested fit cannot be performed (e.g. more clusters than samples)."""


class InvalidConditionError(DataError):
    """Operating condition with non-positive wind speed or bad direction."""


class OutOfDomainError(DataError):
    """A query point lies outside the grid or outside every subdomain."""


class EmptyRegionError(DataError):
    """A region contains no grid nodes."""


class DatasetError(DataError):
    """Dataset is malformed, empty, or mixes grids."""


class PlacementError(DataError):
    """A sensor is not located inside any subdomain."""


class ModelInvariantError(NumericError):
    """A fitted model violates one of its structural invariants."""


class UndefinedErrorMetric(NumericError):
    """A relative error is requested against an identically zero reference."""


class StageError(ClusterFlowError):
    """A pipeline stage failed or a stage dependency is missing."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

    @property
    def exit_code(self):
        return getattr(self.cause, "exit_code", 1)
