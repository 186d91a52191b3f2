"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure a user can
trigger should surface as one of them.
"""


class FlexKDError(Exception):
    exit_code = 1


class ConfigError(FlexKDError):
    exit_code = 2


class DataError(FlexKDError):
    exit_code = 3


class DimensionError(DataError):
    """Shapes of operands do not fit the operation."""


class NumericError(FlexKDError):
    exit_code = 4


class GraphError(FlexKDError):
    """Requested gradient is not available on the recorded graph."""

    exit_code = 4
