"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument violates the documented precondition of an operation."""


class NumericFailure(FloatingPointError):
    """A non-finite quantity appeared during training or inference."""


class ModelFileError(Exception):
    """Base class for problems reading a serialized model."""


class VersionMismatchError(ModelFileError):
    pass


class CorruptPayloadError(ModelFileError):
    pass


class ShapeMismatchError(ModelFileError):
    def __init__(self, field: str, expected, got):
        super().__init__(f"field '{field}': expected shape {expected}, got {got}")
        self.field = field
        self.expected = expected
        self.got = got


class ConfigError(ValueError):
    """Invalid configuration or recipe."""
