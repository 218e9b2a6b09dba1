"""
Error hierarchy shared by every package.

The CLI maps each family to an exit code (see cli.main).
"""


class OatError(Exception):
    """Base class for all pipeline errors."""


class GeometryError(OatError):
    """Image or point does not fit the patch geometry."""


class ParameterError(OatError):
    """Invalid configuration or argument value."""


class DataError(OatError):
    """Missing, malformed or unreadable data."""


class NumericError(OatError):
    """Non-finite values appeared during training."""
