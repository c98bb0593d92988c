"""Exception hierarchy for the toolkit.

Everything raised on purpose derives from :class:`ShdoaError` so callers can
catch toolkit failures without masking programming errors.
"""


class ShdoaError(Exception):
    """Base class for all toolkit errors."""


class DomainError(ShdoaError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class GeometryError(ShdoaError, ValueError):
    """Invalid scene geometry (position outside room, bad grid, ...)."""


class SignalError(ShdoaError, ValueError):
    """Invalid waveform input (too short, silent, rate mismatch, empty band)."""


class DecompositionError(ShdoaError, ValueError):
    """Harmonic decomposition is ill-conditioned at the requested bin."""


class FeatureError(ShdoaError, ValueError):
    """Invalid feature-pipeline input (non-Hermitian matrix, empty block)."""


class EstimationError(ShdoaError, ValueError):
    """DOA aggregation cannot proceed (empty selection, too few points)."""


class ModelIOError(ShdoaError, ValueError):
    """Model file is corrupt, has a wrong version, or mismatched shape."""


class ConfigError(ShdoaError, ValueError):
    """Invalid or inconsistent configuration."""
