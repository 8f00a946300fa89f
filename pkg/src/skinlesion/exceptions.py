"""Error types raised across the pipeline."""


class SkinLesionError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(SkinLesionError, ValueError):
    """A table header does not match the fixed column layout."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class MalformedLabelError(SkinLesionError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DuplicationError(SkinLesionError, ValueError):
    pass


class InsufficientClassError(SkinLesionError, ValueError):
    def __init__(self, message, lesion_class=None):
        super().__init__(message)
        self.lesion_class = lesion_class


class EmptyClassError(InsufficientClassError):
    pass


class ChannelError(SkinLesionError, ValueError):
    pass


class DimensionError(SkinLesionError, ValueError):
    pass


class SpecError(SkinLesionError, ValueError):
    """An augmentation spec is invalid or degenerate for the given image."""


class ConsistencyError(SkinLesionError, ValueError):
    pass


class WeightLoadError(SkinLesionError, RuntimeError):
    pass


class ShapeError(SkinLesionError, ValueError):
    pass


class LabelError(SkinLesionError, ValueError):
    pass


class DivergenceError(SkinLesionError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class PersistenceError(SkinLesionError, OSError):
    pass


class CheckpointFormatError(SkinLesionError, ValueError):
    pass


class CoverageError(SkinLesionError, ValueError):
    """Two image-id sets that must match do not."""

    def __init__(self, message, difference=()):
        super().__init__(message)
        self.difference = sorted(difference)


class WeightError(SkinLesionError, ValueError):
    pass


class EmptyInputError(SkinLesionError, ValueError):
    pass


class ConfigError(SkinLesionError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
