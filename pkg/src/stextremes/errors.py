"""Exception hierarchy shared by all stextremes modules.

Exit-code mapping used by the CLI: ConfigError/DataError -> 2,
NumericalError -> 3.
"""


class StExtremesError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(StExtremesError):
    """Invalid configuration, model specification or arguments."""


class DataError(StExtremesError):
    """Malformed input data (CSV schema, mesh files, artifacts)."""


class MeshError(StExtremesError):
    """Mesh invariant violation or point-location failure."""


class NumericalError(StExtremesError):
    """Factorization failure, non-convergence, or resource overflow."""
