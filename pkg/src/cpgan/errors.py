"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violated a documented precondition (shape, range, size)."""


class ParseError(ValueError):
    """A binary container could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; ``dump_path`` holds the diagnostic dump."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
