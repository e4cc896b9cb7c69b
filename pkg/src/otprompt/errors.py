"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every error raised on purpose by the
library derives from :class:`OTPromptError`.
"""


class OTPromptError(Exception):
    """Base class for all package errors."""


class ShapeError(OTPromptError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateError(OTPromptError, ValueError):
    """A vector that must be normalised has (near) zero norm."""


class SinkhornUnderflowError(OTPromptError, FloatingPointError):
    """The Gibbs kernel underflowed to zero for a whole row or column."""


class NonFiniteError(OTPromptError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class DataError(OTPromptError, ValueError):
    """Corpus or model data is malformed or inconsistent."""


class SchemaVersionError(DataError):
    """A persisted file was written with an unsupported schema version."""


class ConfigError(OTPromptError, ValueError):
    """Invalid or unknown configuration keys."""
