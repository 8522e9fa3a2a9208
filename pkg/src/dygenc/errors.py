"""Exception hierarchy shared across the package."""


class DygencError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DygencError):
    """Tensor-shape mismatch; carries both offending shapes in the message."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}")


class ConfigError(DygencError):
    """Invalid configuration value or combination."""


class NumericsError(DygencError):
    """Non-finite values encountered where finite numbers are required."""


class SchemaError(DygencError):
    """Malformed serialized data. ``line`` is 1-based when set."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptySequence(DygencError):
    """An operation that needs at least one frame got none."""


class EmbedError(DygencError):
    """Text embedding failed (empty input or unknown key in file-backed mode)."""


class EmptyGraphError(DygencError):
    """Graph encoding needs at least one node."""
