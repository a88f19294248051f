"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes in ``main.py``.
"""
from typing import Optional


class HdrtError(Exception):
    """Base class for all domain failures."""


class FormatError(HdrtError):
    """A file does not parse under the named format."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class IncompatibleFormatError(HdrtError):
    """Image kind cannot be stored in the requested format."""


class InvalidImageError(HdrtError):
    """Image container invariants violated."""


class InvalidResponseError(HdrtError):
    """Camera response curve is malformed."""


class ShapeMismatchError(HdrtError):
    """Operands disagree in shape, size or channel count."""


class BracketError(HdrtError):
    """Exposure bracket is malformed."""


class RankDeficientError(HdrtError):
    """The response-recovery system has no unique solution."""


class DegenerateConfigurationError(HdrtError):
    """Correspondences or generator settings admit no valid result."""


class EmptyOverlapError(HdrtError):
    """Validity mask contains no usable pixel."""


class ToneMapError(HdrtError):
    """Scene cannot be tone mapped."""


class GraphError(HdrtError):
    """Autodiff graph misuse."""


class GradientError(HdrtError):
    """Optimizer asked to step a parameter without a gradient."""


class FreezeViolationError(HdrtError):
    """A parameter that must stay frozen was modified or unfrozen."""


class TrainingDivergedError(HdrtError):
    """Loss became NaN or infinite."""


class DatasetError(HdrtError):
    """Dataset is empty, inconsistent or cannot be generated."""


class MissingInputError(HdrtError):
    """A required input file does not exist."""
