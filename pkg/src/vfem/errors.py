"""Exception types shared across the package."""


class VfemError(Exception):
    """Base class for package-specific errors."""


class DegenerateVariance(VfemError):
    """A residual-variance denominator collapsed (noise variance ~ 0)."""


class SingularCovariance(VfemError):
    """A client covariance matrix has no valid log-determinant."""


class SingularSystem(VfemError):
    """A linear system remained numerically singular after the ridge fallback."""


class InsufficientData(VfemError):
    """Not enough observed rows on some client to initialize moment estimates."""


class InsufficientCompleteCases(VfemError):
    """Too few fully observed rows for a complete-case style estimator."""


class MaskRetryExhausted(VfemError):
    """Could not draw a missingness mask satisfying the coverage constraint."""


class ProtocolDesync(VfemError):
    """A message arrived for the wrong iteration/round, or never arrived."""


class SchemaViolation(VfemError):
    """A wire message does not conform to the closed payload schema."""


class NotAFixedPoint(VfemError):
    """Rate-matrix estimation requested at a point the EM map does not fix."""


class ConfigError(VfemError):
    """Invalid user-facing configuration."""
