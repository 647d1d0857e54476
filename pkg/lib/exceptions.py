class DvaeError(Exception):
    """
    Base class for every error raised by the physical layers.
    """


class SingularProjection(DvaeError):
    """
    The closest-point projection is undefined at the given ambient point.
    The random walk reacts by redrawing the offending step's noise.
    """


class DomainError(DvaeError, ValueError):
    """
    An argument lies outside the domain of the operation (off-manifold point,
    time out of bounds, non-positive variance, wrong manifold kind).
    """


class ResampleExceeded(DvaeError):
    """
    The random walk hit the singular set more often than allowed.
    """


class UnsupportedManifold(DvaeError):
    """
    The operation is not available for this manifold kind.
    """


class ShapeMismatch(DvaeError, ValueError):
    """
    Array shapes do not agree with the network or parameter layout.
    """


class NonFiniteLoss(DvaeError):
    """
    The loss became NaN or infinite.

    Attributes:
        diagnostics (dict): Summary of the offending batch (terms, time range, norms).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingAborted(DvaeError):
    """
    Training stopped on a non-finite loss.

    Attributes:
        model: The last model whose epoch finished with finite metrics.
        history (list): Metrics of the completed epochs.
        cause (NonFiniteLoss): The error that stopped training.
        optimizer_state: Adam state matching `model`.
    """

    def __init__(self, message, model, history, cause, optimizer_state=None):
        super().__init__(message)
        self.model = model
        self.history = history
        self.cause = cause
        self.optimizer_state = optimizer_state


class DegenerateWeights(DvaeError):
    """
    Every importance log-weight is -inf.
    """


class BadGrid(DvaeError, ValueError):
    """
    The translation grid size does not divide the picture size.
    """


class ConfigError(DvaeError, ValueError):
    """
    A run configuration value is missing, unknown or invalid.
    """


class DatasetFormatError(DvaeError):
    """
    Base class for malformed IDX files and dataset containers.
    """


class BadMagic(DatasetFormatError):
    pass


class TruncatedFile(DatasetFormatError):
    pass


class CountMismatch(DatasetFormatError):
    pass
