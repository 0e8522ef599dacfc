"""Exception hierarchy shared across the package."""


class PCStreamError(Exception):
    """Base class for all package errors."""


class ConfigError(PCStreamError, ValueError):
    """Invalid configuration or inconsistent inputs."""


class ManifestParseError(PCStreamError, ValueError):
    """Malformed manifest document. ``path`` locates the offending node."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ManifestValidationError(PCStreamError, ValueError):
    """A manifest parsed but violates a variant invariant."""

    def __init__(self, message, tile=None, chunk=None, level=None):
        self.tile, self.chunk, self.level = tile, chunk, level
        where = []
        if tile is not None:
            where.append(f"tile={tile}")
        if chunk is not None:
            where.append(f"chunk={chunk}")
        if level is not None:
            where.append(f"level={level}")
        super().__init__(f"[{' '.join(where)}] {message}" if where else message)


class TraceError(PCStreamError, ValueError):
    """Trace file rejected during ingest. ``row`` is 1-based, header excluded."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class PredictionUnavailable(PCStreamError):
    """Predictor has no usable observations."""


class DegenerateFit(PCStreamError):
    """Regression window has no spread in time."""


class SelectionGuardError(PCStreamError):
    """Brute-force enumeration exceeds the configured state guard."""


class EpisodeFinished(PCStreamError):
    """step() called after the last chunk was delivered."""


class NonFiniteError(PCStreamError, FloatingPointError):
    """A NaN or inf surfaced where finite numbers are required."""


class ShapeMismatch(PCStreamError, ValueError):
    pass


class ProtocolError(PCStreamError):
    """Wire frame could not be decoded."""


class FramingError(ProtocolError):
    pass


class RoundError(PCStreamError):
    """Every selected client failed within a federation round."""
