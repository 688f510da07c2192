"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not satisfy a primitive's shape rule."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite value."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class StateError(RuntimeError):
    """An object was used in a state that does not allow the operation."""


class GenerationError(ValueError):
    """A synthetic scene change cannot be applied to the given scene."""


class FormatError(ValueError):
    """A file does not conform to its binary or text format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
