"""Exception types shared across the package."""


class ChaoshadowError(Exception):
    """Base class for all package errors."""


class KindMismatchError(ChaoshadowError):
    """A map operation was called on a flow, or vice versa."""


class DivergenceError(ChaoshadowError):
    """A trajectory left the declared bounded region or became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MagnitudeCapError(ChaoshadowError):
    """A tangent/adjoint solution exceeded the overflow cap; caller must segment."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateBasisError(ChaoshadowError):
    """Rank collapse of a propagated basis (vanishing R diagonal)."""


class ConditioningError(ChaoshadowError):
    """An ill-conditioned constraint system; diagnostics attached."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigurationError(ChaoshadowError):
    """Inconsistent solver configuration (e.g. wrong unstable count)."""


class CenterDegeneracyError(ChaoshadowError):
    """|F| fell below threshold on a flow orbit; center direction undefined."""


class AdmissibilityError(ChaoshadowError):
    """A covector/scalar pair violates the F(psi) = omega(F) constraint."""


class BoundaryBufferError(ChaoshadowError):
    """Access to splitting data inside the convergence buffer at the orbit ends."""


class NearTangencyError(ChaoshadowError):
    """Subspace angles too small to invert the frame matrix."""


class ConfigFileError(ChaoshadowError):
    """Invalid experiment configuration file; carries a line anchor."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
