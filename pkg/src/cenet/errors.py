"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid network/training configuration (bad widths, divisibility, keys)."""


class ShapeError(ValueError):
    """Tensor or array shapes violate an operation's contract."""


class IngestionError(ValueError):
    """A volume file is missing, corrupt, or not a 3D scalar image."""


class UndefinedDistanceError(ValueError):
    """A surface-distance metric was requested against an empty surface."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
