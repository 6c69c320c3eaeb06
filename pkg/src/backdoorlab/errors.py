"""Exception types shared across the package."""


class BackdoorLabError(Exception):
    """Base class for all package errors."""


class DataError(BackdoorLabError):
    """Malformed dataset, record, or trigger file."""


class ConfigError(BackdoorLabError):
    """Invalid configuration (bad field value, missing path, schema violation)."""


class ModelError(BackdoorLabError):
    """Invalid architecture descriptor, layer id, or model state."""


class TrainingDiverged(BackdoorLabError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class OptimizationError(BackdoorLabError):
    """Trigger or reverse-engineering optimization failed to produce a finite iterate."""
