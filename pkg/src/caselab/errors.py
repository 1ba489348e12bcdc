"""Exception types shared across the package."""


class CaselabError(Exception):
    """Base class for errors raised by this package."""


class ShapeMismatch(CaselabError, ValueError):
    """An operation received a tensor whose shape does not fit the layer."""

    def __init__(self, op, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: expected {expected}, got {got}")


class FileFormatError(CaselabError, ValueError):
    """A binary file failed to parse; ``offset`` points at the failing byte."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class DegenerateSampleError(CaselabError, ValueError):
    """A statistical test was handed a sample it cannot rank or scale."""


class NumericalError(CaselabError, ArithmeticError):
    """A computation produced non-finite values (e.g. training divergence)."""
