class InvalidArgumentError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class ShapeMismatchError(FormatError):
    def __init__(self, field, expected, got):
        self.field = field
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"shape mismatch for {field!r}: expected {self.expected}, got {self.got}")


class ConfigError(ValueError):
    pass


class TrainingFailure(RuntimeError):
    """Raised when the loss stops being finite; ``diagnostics`` holds the last known state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
