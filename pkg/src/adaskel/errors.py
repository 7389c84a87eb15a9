"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A structural parameter (kernel size, temperature, ...) is invalid."""


class BatchSizeError(ValueError):
    """Batch statistics requested over fewer than two rows."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, count mismatch, ...)."""


class PartitionError(ValueError):
    """A joint grouping does not partition the source joint set."""


class ParseError(ValueError):
    """A text artifact (skeleton file, grouping file, checkpoint) is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CompatibilityError(ValueError):
    """A checkpoint's header does not match the receiving model."""

    def __init__(self, field, expected, found):
        super().__init__(f"checkpoint field {field!r}: expected {expected!r}, found {found!r}")
        self.field = field
