"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


class InvalidData(ValueError):
    """Input data (files, manifests, configs) is malformed or empty."""


class ParseError(InvalidData):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite during training."""

    def __init__(self, message: str, batch_id: int, dump: dict | None = None):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump = dump or {}
