"""Exception types raised across the package."""


class ConfigError(ValueError):
    """A configuration value violates one of its constraints."""


class DimensionError(ValueError):
    """An array does not have the shape the model configuration requires."""


class IngestionError(IOError):
    """An image or mask file could not be loaded as a valid sample."""


class TrainingAborted(RuntimeError):
    """A training sub-step produced a non-finite loss or gradient."""

    def __init__(self, loss_name, message):
        super().__init__(f"{loss_name}: {message}")
        self.loss_name = loss_name


class CheckpointMismatch(ValueError):
    """A checkpoint's parameter manifest disagrees with its configuration."""
