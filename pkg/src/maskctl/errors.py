"""Exception hierarchy.

``ValidationError`` subclasses map to CLI exit code 2; anything else raised
during a run maps to exit code 3.
"""


class MaskctlError(Exception):
    pass


class ValidationError(MaskctlError, ValueError):
    pass


class DegenerateBox(ValidationError):
    pass


class OverlappingRegions(ValidationError):
    pass


class InvalidArity(ValidationError):
    pass


class ScheduleOverflow(ValidationError):
    pass


class UnknownPartialMask(ValidationError, KeyError):
    pass


class InfeasiblePacking(ValidationError):
    pass


class ShapeMismatch(MaskctlError, ValueError):
    pass


class EmptyRow(MaskctlError, ValueError):
    pass


class EmptyList(MaskctlError, ValueError):
    pass


class OutOfBounds(MaskctlError, IndexError):
    pass


class NonMonotoneTime(MaskctlError, ValueError):
    pass


class DivergenceDetected(MaskctlError, RuntimeError):
    pass


class FormatError(MaskctlError, ValueError):
    """Malformed binary artifact (bad magic, version, or truncated payload)."""
