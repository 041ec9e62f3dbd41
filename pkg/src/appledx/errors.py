"""Exception hierarchy shared by every module."""


class AppleDxError(Exception):
    """Base class for all errors raised by appledx."""


class DimensionError(AppleDxError, ValueError):
    """Tensor shapes or extents are incompatible with an operation."""


class ValidationError(AppleDxError, ValueError):
    """An argument or data structure violates its contract."""


class UsageError(AppleDxError, RuntimeError):
    """An API was called in a state where the call makes no sense."""


class GraphError(AppleDxError, RuntimeError):
    """The computation graph is inconsistent (e.g. a trainable tensor got no gradient)."""


class NumericalError(AppleDxError, FloatingPointError):
    """A forward op or the training loss produced NaN or Inf."""


class CheckpointFormatError(AppleDxError):
    """Checkpoint file is truncated, corrupt, or of an unsupported version."""


class IncompatibleCheckpointError(AppleDxError):
    """Checkpoint tensors do not fit the target model."""

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class IngestionError(AppleDxError, OSError):
    """An image could not be read or decoded."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class ParseError(AppleDxError, ValueError):
    """A text file (manifest, config, confusion matrix) is malformed."""

    def __init__(self, message, line=None, source=None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.source = source
