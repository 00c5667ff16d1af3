"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad shapes, bad hyperparameters, or a malformed run configuration."""


class ContractViolation(RuntimeError):
    """A caller broke a documented precondition (e.g. acting with a masked action)."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
