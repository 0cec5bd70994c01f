"""Exception types shared across the simulator."""


class FedProKError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FedProKError, ValueError):
    """Array shapes do not chain or do not match."""


class LabelError(FedProKError, ValueError):
    """A class label is outside the allocated classifier range."""


class ArgumentError(FedProKError, ValueError):
    """An argument is empty or outside its admissible range."""


class NumericError(FedProKError, ArithmeticError):
    """A value became non-finite or a direction is undefined."""


class FormatError(FedProKError, ValueError):
    """Binary payload is truncated or malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigurationError(FedProKError, ValueError):
    """An experiment or partition configuration cannot be satisfied."""


class RunError(FedProKError, RuntimeError):
    """A failure inside the round loop, tagged with where it happened."""

    def __init__(self, round: int, client: int | None, cause: BaseException):
        where = f"round {round}" + (f", client {client}" if client is not None else ", server")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.round = round
        self.client = client
        self.cause = cause
