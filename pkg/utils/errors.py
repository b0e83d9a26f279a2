from typing import Optional


class SegbenchError(Exception):
    """Base class for every error raised by the benchmark harness"""


class DatasetError(SegbenchError):
    """Invalid or unreadable dataset content.

    Attributes:
        path (Optional[str]): File that caused the failure, when one is known.
    """

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = str(path) if path is not None else None
        if self.path:
            message = "{}: {}".format(self.path, message)
        super().__init__(message)


class InvalidParameterError(SegbenchError, ValueError):
    """A numeric argument is outside its admissible range"""


class ConfigurationError(SegbenchError):
    """A configuration or a slice/experiment combination is not usable"""


class ShapeError(SegbenchError, ValueError):
    """Array shapes are incompatible"""


class CheckpointError(SegbenchError):
    """Checkpoint container is corrupt or does not fit the target store"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = str(path) if path is not None else None
        if self.path:
            message = "{}: {}".format(self.path, message)
        super().__init__(message)


class NonDeterministicComputationError(SegbenchError):
    """Two forward passes over identical parameters disagree"""


class MissingGradientError(SegbenchError):
    """An optimizer step was requested before gradients were populated"""


class NonFiniteError(SegbenchError, FloatingPointError):
    """NaN or Inf produced by an operation while debug checks are enabled"""


class TrainingDivergedError(SegbenchError):
    """Loss became non-finite during training"""

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__("epoch {}: {}".format(epoch, message))


class UndefinedCorrelationError(SegbenchError, ValueError):
    """Correlation requested on data with zero variance"""
