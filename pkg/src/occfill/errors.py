"""Shared exception types for the package."""


class OccfillError(Exception):
    """Base class for every error raised by this package."""


class PreconditionError(OccfillError, ValueError):
    """An operation was invoked outside its documented contract."""


class ShapeMismatchError(PreconditionError):
    """Two arrays that must agree in shape or size do not.

    Both sides are kept on the exception so callers can report exactly
    which dimensions disagreed.
    """

    def __init__(self, what, got, expected):
        self.got = tuple(int(v) for v in np_shape(got))
        self.expected = tuple(int(v) for v in np_shape(expected))
        super().__init__(f"{what}: got shape {self.got}, expected {self.expected}")


def np_shape(value):
    """Accept an int, a shape tuple, or an array-like and return a shape tuple."""
    if isinstance(value, int):
        return (value,)
    if hasattr(value, "shape"):
        return value.shape
    return tuple(value)


class FormatError(OccfillError, ValueError):
    """A serialized file is malformed; carries the byte offset of the problem."""

    def __init__(self, offset, message):
        self.offset = int(offset)
        super().__init__(f"{message} (byte offset {self.offset})")
