"""Exception types shared across the package."""


class CompactRecError(Exception):
    """Base class for all package-specific errors."""


class ParseError(CompactRecError):
    """Raised when an interaction file contains a malformed line."""

    def __init__(self, path, line_number, message):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class EmptyDatasetError(CompactRecError):
    """Raised when loading or filtering leaves no interactions."""


class SizingError(CompactRecError):
    """Raised when a derived structure would exceed its configured size cap."""


class NumericalDomainError(CompactRecError):
    """Raised when a matrix fails a positive-definiteness requirement."""

    def __init__(self, message, pivot_index=None):
        self.pivot_index = pivot_index
        super().__init__(message)


class UndefinedMetricError(CompactRecError):
    """Raised when a metric is requested on too few samples."""


class TrainingDivergedError(CompactRecError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, epoch, batch_index, value):
        self.epoch = epoch
        self.batch_index = batch_index
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch_index}"
        )
