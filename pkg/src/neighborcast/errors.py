"""Exception hierarchy shared by all neighborcast modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataLoadError / StoreLoadError / OSError -> 3, NumericError -> 4.
"""


class NeighborcastError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NeighborcastError):
    """Shapes of the operands are incompatible."""


class ContractError(NeighborcastError):
    """An API precondition was violated (e.g. backward called twice)."""


class ConfigError(NeighborcastError):
    """A configuration value is invalid or inconsistent."""


class DataLoadError(NeighborcastError):
    """A dataset or adjacency file could not be parsed."""


class StoreLoadError(NeighborcastError):
    """A datastore / index / checkpoint file is corrupt or mismatched."""


class RequestError(NeighborcastError):
    """A runtime request is unsatisfiable (e.g. K larger than the store)."""


class DegenerateDataError(NeighborcastError):
    """The data does not support the requested statistic (e.g. zero std)."""


class NumericError(NeighborcastError):
    """A numeric failure such as NaN loss or NaN gradients."""
