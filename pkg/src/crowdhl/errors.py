"""Exception hierarchy shared by every stage of the pipeline."""


class HighlightError(Exception):
    """Base class for all errors raised by crowdhl."""


class ShapeError(HighlightError, ValueError):
    """Tensor extents do not agree with what an operation requires."""


class BoundsError(HighlightError, IndexError):
    """A window or frame range falls outside the source tensor."""


class FormatError(HighlightError, ValueError):
    """A file or manifest is malformed."""


class UsageError(HighlightError, ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(HighlightError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
