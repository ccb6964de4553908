"""Exception hierarchy shared across the package."""


class FairtuneError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(FairtuneError):
    """A dataset schema names columns or rules that the file cannot satisfy."""


class DataValidationError(FairtuneError):
    """Loaded data violates a contract (non-binary labels, bad rows, ...)."""


class SplitError(FairtuneError):
    """A requested split leaves some part empty or single-class/single-group."""


class GenerationError(FairtuneError):
    """A synthetic-data spec cannot be realized."""


class ShapeError(FairtuneError):
    """Array dimensions do not match what a network or rule expects."""


class TrainingError(FairtuneError):
    """Training diverged (non-finite loss)."""


class NumericError(FairtuneError):
    """A numeric computation produced non-finite values."""


class CheckpointError(FairtuneError):
    """A model checkpoint is unreadable or from an incompatible version."""


class UndefinedRateError(FairtuneError):
    """A group-conditional rate has an empty conditioning set."""

    def __init__(self, rate: str, group: int | None = None):
        self.rate = rate
        self.group = group
        where = f" for group {group}" if group is not None else ""
        super().__init__(f"{rate} is undefined{where}: empty conditioning set")


class UndefinedPerformanceError(FairtuneError):
    """The performance measure is undefined (labels contain a single class)."""


class DegenerateValidationError(FairtuneError):
    """The validation data cannot support the requested objective."""


class MinibatchError(FairtuneError):
    """Could not sample a minibatch with a well-defined bias value."""
