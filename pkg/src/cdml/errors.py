"""Exception types shared across the package."""


class CDMLError(Exception):
    """Base class for all package errors."""


class DimensionError(CDMLError, ValueError):
    """An array does not have the extent an operation requires."""


class ContractError(CDMLError, ValueError):
    """A precondition of an operation was violated."""


class EvaluationError(CDMLError, ArithmeticError):
    """A function produced (or was given) non-finite values."""


class FormatError(CDMLError, ValueError):
    """A binary checkpoint could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(CDMLError, ValueError):
    """A sensor log row could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelError(ParseError):
    """A label string is not one of the known contact labels."""


class TrainingAbort(CDMLError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(f"{message} (epoch={epoch}, step={step})")
        self.epoch = epoch
        self.step = step
