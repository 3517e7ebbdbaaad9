"""Exception hierarchy shared by all flowgan modules."""


class FlowganError(Exception):
    """Base class for all errors raised by this package."""


# --- dynamic maps ---------------------------------------------------------

class CellBudgetExceeded(FlowganError):
    """Refinement would produce more cells than the hard cap allows."""

    def __init__(self, count: int, budget: int):
        self.count = count
        self.budget = budget
        super().__init__(f"refinement yields {count} cells, budget is {budget}")


class MisalignedRectangle(FlowganError):
    """A refinement rectangle does not snap to its parent grid."""


class RectangleOutOfExtent(FlowganError):
    """A refinement rectangle lies (partly) outside the map extent."""


class NotInExtent(FlowganError):
    """A query point lies outside the map extent."""


class TilingViolation(FlowganError):
    """Cells overlap or leave gaps, so they do not tile the extent."""


class MapParseError(FlowganError):
    """A map document could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# --- mobility data --------------------------------------------------------

class InvalidConfig(FlowganError):
    """A configuration value is missing, malformed, or out of range."""


class EmptySplit(FlowganError):
    """A train/holdout split would leave one side empty."""


class EmptyDataset(FlowganError):
    """An operation requires at least one dataset entry."""


class DatasetMismatch(FlowganError):
    """A dataset file does not match the map it references."""


# --- flow codec -----------------------------------------------------------

class NegativeCount(FlowganError):
    """Flow counts must be nonnegative."""


class ScaleTooSmall(FlowganError):
    """A normalized flow value exceeds the encoding scale."""


# --- tensor ops / model ---------------------------------------------------

class ShapeMismatch(FlowganError):
    """Tensor shapes are inconsistent for the requested operation."""


class NonFiniteValue(FlowganError):
    """An operation produced NaN or Inf (diagnostic guard)."""


class UnknownCondition(FlowganError):
    """A condition label is not part of the model vocabulary."""


class DivergenceDetected(FlowganError):
    """Training loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)


class VersionMismatch(FlowganError):
    """Checkpoint file was written by an incompatible format version."""


class CorruptFile(FlowganError):
    """Checkpoint file is truncated or fails its integrity check."""


class ModeMismatch(FlowganError):
    """Conditional/unconditional checkpoint loaded by the wrong consumer."""


# --- gravity baseline -----------------------------------------------------

class DegenerateDesign(FlowganError):
    """The calibration system is rank deficient (e.g. all distances equal)."""


# --- evaluation -----------------------------------------------------------

class EmptyCorpus(FlowganError):
    """A metric over a corpus needs at least one matrix."""


class ImageTooSmall(FlowganError):
    """Image is smaller than the structural-similarity window."""


class CorpusMisaligned(FlowganError):
    """Generated and ground corpora do not pair up by (map, condition)."""
