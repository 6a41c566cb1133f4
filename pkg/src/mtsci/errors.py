"""Exception types shared across the package.

The CLI maps these onto its exit codes; library users can catch them
individually.
"""


class MtsciError(Exception):
    """Base class for all package errors."""


class ConfigError(MtsciError):
    """Invalid configuration value or malformed config file."""


class ParseError(MtsciError):
    """Malformed input data file."""


class ValidationError(MtsciError):
    """Input data violates a documented invariant."""


class CheckpointMismatchError(MtsciError):
    """Checkpoint is incompatible with the requested configuration."""


class DivergenceError(MtsciError):
    """Training produced a non-finite loss."""


class JoinError(MtsciError):
    """Predictions and ground truth could not be joined cell-by-cell."""
