class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ManifestError(ValueError):
    """Malformed dataset manifest."""


class CheckpointFormatError(ValueError):
    """Checkpoint has the wrong magic bytes or version."""


class CheckpointIntegrityError(ValueError):
    """Checkpoint is truncated or its record count does not match."""


class ShapeMismatchError(ValueError):
    """A stored tensor does not fit the model it is being loaded into."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training."""
