class BLTDError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(BLTDError):
    pass


class CorpusError(BLTDError):
    pass


class DivergenceError(BLTDError):
    def __init__(self, message: str, step: int = -1, checkpoint_path: str = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class TensorShapeError(BLTDError):
    pass


class NumericalError(BLTDError):
    pass


class MaskError(BLTDError):
    pass


class SegmentationError(BLTDError):
    pass


class CheckpointError(BLTDError):
    pass


class CacheMismatchError(BLTDError):
    pass


class GenerationError(BLTDError):
    pass
