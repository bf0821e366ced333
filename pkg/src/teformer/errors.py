class TeformerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TeformerError, ValueError):
    pass


class ContractError(TeformerError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(TeformerError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(TeformerError, ValueError):
    """Checkpoint or dataset file could not be read."""


class ParseError(FormatError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(TeformerError, ArithmeticError):
    pass
