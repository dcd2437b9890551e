"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: validation problems exit 1,
numerical failures exit 2, I/O problems exit 3.
"""


class ValidationError(ValueError):
    """Bad configuration, malformed input, or violated precondition."""


class ProtocolError(ValidationError):
    """Impossible lane/track combination in a benchmark split."""


class NotProjectableError(ValidationError):
    """Point cannot be projected by the given camera model."""


class NumericalError(RuntimeError):
    """An optimization or registration step failed numerically."""


class RegistrationFailureError(NumericalError):
    """Point-cloud registration could not find enough correspondences."""
