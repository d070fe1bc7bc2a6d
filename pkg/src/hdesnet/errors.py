"""Exception hierarchy shared by every engine module."""


class HdesError(Exception):
    """Base class for all engine errors."""


class ShapeError(HdesError, ValueError):
    pass


class InvalidDimensionError(ShapeError):
    pass


class InvalidGeometryError(ShapeError):
    pass


class ConfigError(HdesError, ValueError):
    pass


class MissingWeightError(HdesError, KeyError):
    pass


class NumericError(HdesError, ArithmeticError):
    pass


class StructureError(HdesError):
    pass


class PatternMissError(HdesError):
    pass


class EmptyMaskError(HdesError, ValueError):
    pass


class LabelError(HdesError, ValueError):
    pass


class FormatError(HdesError):
    """Malformed file. ``offset`` is the byte position where decoding failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
