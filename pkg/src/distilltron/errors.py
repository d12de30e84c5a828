"""Exception hierarchy shared by every subsystem."""


class DistilltronError(Exception):
    """Base class for all package errors."""


class DimensionError(DistilltronError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(DistilltronError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(DistilltronError, RuntimeError):
    """A documented precondition of a call was violated."""


class ConfigError(DistilltronError, ValueError):
    """Invalid configuration value or combination of values."""


class InputError(DistilltronError, ValueError):
    """Invalid data passed in by the caller."""


class ParseError(DistilltronError, ValueError):
    """A file could not be decoded.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(DistilltronError, RuntimeError):
    """Loss or gradients became non-finite during training.

    Carries the last parameters known to be finite so callers can recover.
    """

    def __init__(self, message, step, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
