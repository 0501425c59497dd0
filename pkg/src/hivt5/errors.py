class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent."""


class StageError(RuntimeError):
    """Training stages were invoked out of order."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the requested model."""
