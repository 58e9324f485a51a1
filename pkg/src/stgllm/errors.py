"""Exception hierarchy shared across the package."""


class STGError(Exception):
    """Base class for all errors raised by stgllm."""


class DatasetError(STGError):
    pass


class MissingPayloadError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    """Payload length is not a whole number of time steps."""


class ShapeMismatchError(DatasetError):
    """Descriptor and payload disagree on the tensor shape."""


class NonFiniteValueError(DatasetError):
    pass


class SplitError(STGError):
    pass


class CalendarIndexError(STGError, IndexError):
    pass


class WidthMismatchError(STGError, ValueError):
    pass


class ContextOverflowError(STGError):
    pass


class CheckpointError(STGError):
    pass


class MissingTensorError(CheckpointError):
    def __init__(self, name: str):
        super().__init__(f"checkpoint is missing tensor {name!r}")
        self.name = name


class TrainingError(STGError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at batch {batch_index}")
        self.batch_index = batch_index
        self.loss = loss


class VariantError(STGError, ValueError):
    pass


class ConfigError(STGError, ValueError):
    pass


class StageError(STGError):
    """Wraps an error raised inside one stage of the forecasting pipeline."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
