"""Exception taxonomy shared across the package."""


class DpdError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DpdError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(DpdError, ValueError):
    """Array arguments have incompatible or unexpected shapes."""


class DataError(DpdError, ValueError):
    """Input data violates a documented precondition (range, finiteness)."""


class TokenError(DpdError, ValueError):
    """Semantic token id outside the vocabulary."""


class CheckpointError(DpdError, RuntimeError):
    """Checkpoint file is malformed, corrupted, or inconsistent."""


class TrainingDivergenceError(DpdError, RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
