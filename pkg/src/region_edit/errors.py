"""Exception types shared across the package."""


class ScheduleRangeError(ValueError):
    """Schedule parameters or timesteps out of range."""


class ShapeMismatchError(ValueError):
    """Two tensors that must agree in shape do not."""


class DegenerateEmbeddingError(ValueError):
    """An embedding with zero norm cannot be normalized."""


class GuidanceDivergenceError(RuntimeError):
    """Non-finite latent or gradient during guided sampling."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class BundleGeometryError(ValueError):
    """Model bundle components disagree on image/latent geometry."""


class ModelLoadError(RuntimeError):
    """A model checkpoint could not be loaded or failed verification."""
