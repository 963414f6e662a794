"""Error types shared across the package.

Each class marks a distinct failure kind so callers (and the CLI exit-code
mapping) can tell configuration problems, missing inputs, bad binary files,
and numerical breakdowns apart.
"""


class MimofmError(Exception):
    """Base class for package errors."""


class ConfigError(MimofmError):
    """Invalid configuration value or malformed config document."""


class DimensionMismatchError(MimofmError, ValueError):
    """Array arguments whose shapes do not describe one consistent system."""


class SingularChannelError(MimofmError):
    """Channel matrix too ill-conditioned for the requested precoder."""


class BisectionError(MimofmError):
    """Dual-variable bisection could not bracket or meet the power target."""


class NumericalFailureError(MimofmError):
    """NaN/Inf or other numerical breakdown in a forward/backward pass."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class GraphConsumedError(MimofmError):
    """Backward called on a graph that was already consumed."""


class DatasetFormatError(MimofmError):
    """Base class for binary dataset file problems."""


class BadMagicError(DatasetFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(DatasetFormatError):
    """File declares an unsupported format version."""


class TruncatedPayloadError(DatasetFormatError):
    """File ends before the declared payload is complete."""


class PrerequisiteError(MimofmError):
    """A pipeline stage is missing an input artifact from an earlier stage."""
