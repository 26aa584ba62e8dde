"""Exception types shared across the package."""

from .tensor import DomainError, GraphError, ShapeError


class ConfigError(ValueError):
    """Invalid model/training configuration."""


class InputError(ValueError):
    """Malformed user input (empty prompt, bad id...)."""


class DataError(ValueError):
    """Inconsistent dataset contents (unknown case id, unplaceable region...)."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be read (version mismatch, checksum failure)."""


__all__ = ["ConfigError", "InputError", "DataError", "CheckpointError",
           "DomainError", "GraphError", "ShapeError"]
