"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ParameterError/ConfigError -> 2,
DataError/FormatError/IO -> 3, NumericalError and subclasses -> 4.
"""


class EsiError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(EsiError, ValueError):
    """Invalid argument or shape mismatch."""


class ConfigError(ParameterError):
    """Invalid experiment configuration."""


class DataError(EsiError):
    """Bad or missing input data."""


class FormatError(DataError):
    """Malformed file (bad magic, truncation, dimension mismatch)."""


class PlacementError(DataError):
    """Could not place non-overlapping sources within the attempt budget."""


class NumericalError(EsiError):
    """Numerical failure (singularity, blow-up, divergence)."""


class InstabilityError(NumericalError):
    """ODE integration blew up for the given parameter set."""


class DivergenceError(NumericalError):
    """Training loss became non-finite."""


class UndefinedResultError(NumericalError):
    """Metric is undefined for the given input (e.g. all-zero estimate)."""
