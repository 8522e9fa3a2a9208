"""Dynamic scene-graph sequence encoding and question answering, desk scale."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DygencError,
    EmbedError,
    EmptyGraphError,
    EmptySequence,
    NumericsError,
    SchemaError,
    ShapeError,
)

__all__ = [
    "ConfigError",
    "DygencError",
    "EmbedError",
    "EmptyGraphError",
    "EmptySequence",
    "NumericsError",
    "SchemaError",
    "ShapeError",
    "__version__",
]
