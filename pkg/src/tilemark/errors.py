"""Exception types shared across the package."""


class TilemarkError(Exception):
    pass


class ConfigurationError(TilemarkError, ValueError):
    """Invalid hyperparameters or parameter shapes."""


class InputShapeError(TilemarkError, ValueError):
    """Input spatial dims incompatible with the network's downsampling."""


class ShapeError(TilemarkError, ValueError):
    """Arrays that must align do not."""


class DomainError(TilemarkError, ValueError):
    """Argument outside the operation's domain."""


class ManifestError(TilemarkError):
    """Dataset directory is missing files."""


class CheckpointError(TilemarkError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class NumericalError(TilemarkError, FloatingPointError):
    """Non-finite loss during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
