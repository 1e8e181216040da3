"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid dimensions, ranges or experiment settings."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class CalibrationError(ValueError):
    """A noise-calibration precondition does not hold."""


class CompositionError(ValueError):
    """A per-step privacy loss is outside the range the composition bound allows."""


class AuditError(RuntimeError):
    """The privacy audit did not certify the configured budget."""

    def __init__(self, message, ledger=None):
        super().__init__(message)
        self.ledger = ledger


class ParseError(ValueError):
    """Malformed LIBSVM input."""

    def __init__(self, lineno, token, reason):
        super().__init__(f"line {lineno}: {reason}: {token!r}")
        self.lineno = lineno
        self.token = token
