"""Exception types shared across the package."""


class SparsError(Exception):
    pass


class ParameterError(SparsError, ValueError):
    """Invalid argument value or combination."""


class ShapeError(SparsError, ValueError):
    pass


class FormatError(SparsError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UsageError(SparsError, RuntimeError):
    pass


class InvariantError(SparsError, RuntimeError):
    pass


class NumericalError(SparsError, FloatingPointError):
    pass


class StageError(SparsError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
