"""Exception types shared across the toolkit."""


class CopyDetError(Exception):
    """Base class for all toolkit errors."""


class ZeroVector(CopyDetError):
    """A vector with (near-)zero L2 norm where a direction is required."""


class DimMismatch(CopyDetError):
    """Operands declare incompatible vector dimensions."""


class ShapeMismatch(CopyDetError):
    """Parameter and gradient arrays disagree in shape."""


class FormatError(CopyDetError):
    """A file does not conform to the expected binary or text format."""


class EmptyBatch(CopyDetError):
    """A training batch with no elements."""


class EmptyGroundTruth(CopyDetError):
    """Evaluation requested against a ground truth with no positive pairs."""
