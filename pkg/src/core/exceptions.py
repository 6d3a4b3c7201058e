"""
Error hierarchy shared by the core modules and the command-line surface.
"""


class XtrapolationError(Exception):
    """Base class for every error raised by this package."""


class InputValidationError(XtrapolationError, ValueError):
    """Malformed inputs: shapes, non-finite values, levels, files, config."""


class ComputationError(XtrapolationError, RuntimeError):
    """A numerical step failed on otherwise valid inputs."""


class ConvergenceError(ComputationError):
    """An iterative solver hit its iteration cap."""
