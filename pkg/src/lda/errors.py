"""Exception taxonomy shared across the package."""


class LdaError(Exception):
    """Base class for all package-specific failures."""


class PlacementError(LdaError):
    """Rejection sampling could not place non-overlapping scene objects."""


class ControllerError(LdaError):
    """Scripted controller cannot act (e.g. instruction subject missing)."""


class ParseError(LdaError):
    """Malformed source record; carries the offending line/row number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"{message} (line {line})")
        self.line = line


class OrderingError(ParseError):
    """Timestamps or frame indices out of order in a source file."""


class AssetError(LdaError):
    """A referenced image file is missing or unreadable."""


class ConfigError(LdaError):
    """Invalid or inconsistent configuration (unregistered source, empty pool, ...)."""


class LengthError(LdaError):
    """Trajectory too short for the requested operation."""


class NormalizationError(LdaError):
    """Instruction text contains a token outside the synonym/canonical tables."""

    def __init__(self, message, token=None):
        super().__init__(message)
        self.token = token


class MigrationError(LdaError):
    """Store or checkpoint version is not compatible with this code."""


class CorruptionError(LdaError):
    """Checksum mismatch or truncated payload; names the damaged item."""


class RoutingError(LdaError):
    """Modality presence inconsistent with the requested task mode."""


class WindowError(LdaError):
    """Episode too short for the requested training window."""


class LeakageError(LdaError):
    """Evaluation store shares episode ids with the training store."""


class DegenerateInputError(LdaError):
    """Input carries no variance where variance is required (e.g. PCA)."""


class NumericalFailure(LdaError):
    """NaN/Inf encountered; carries the offending term name."""

    def __init__(self, message, term=None):
        super().__init__(message if term is None else f"{message} [{term}]")
        self.term = term


class CompatibilityError(LdaError):
    """Checkpoint/runtime mismatch (config shapes, encoder fingerprint)."""
