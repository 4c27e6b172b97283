"""Exception types shared across the toolkit."""


class DomainError(ValueError):
    """Input violates a documented precondition."""


class UninformativeBinError(DomainError):
    """Estimator denominator vanishes for the requested photon number."""


class InitializationError(RuntimeError):
    """Could not seed the mixture fit (fewer local maxima than peaks)."""


class FitFailureError(RuntimeError):
    """Nonlinear fit did not converge within the iteration cap."""

    def __init__(self, message, residual_norm=None):
        super().__init__(message)
        self.residual_norm = residual_norm


class NumericalInstabilityError(RuntimeError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""
