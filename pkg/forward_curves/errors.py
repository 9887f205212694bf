"""Exception hierarchy for the forward-curve toolkit."""

from typing import Any, Dict, Optional


class ForwardCurveError(Exception):
    """Base class for every error raised by forward_curves."""


class StructuralError(ForwardCurveError, ValueError):
    """Curves or operators built on different SpaceConfigs were combined."""


class CurveDomainError(ForwardCurveError, ValueError):
    """A value lies outside the domain of the operation applied to it."""

    def __init__(self, message: str, node: Optional[Any] = None, value: Optional[float] = None):
        super().__init__(message)
        self.node = node
        self.value = value


class CurveRangeError(ForwardCurveError, ArithmeticError):
    """A node-wise transform overflowed."""

    def __init__(self, message: str, node: Optional[Any] = None):
        super().__init__(message)
        self.node = node


class InvertibilityError(ForwardCurveError, ValueError):
    """A multiplicative kernel is not bounded away from zero."""

    def __init__(self, message: str, node: Optional[Any] = None, value: Optional[float] = None):
        super().__init__(message)
        self.node = node
        self.value = value


class CapabilityError(ForwardCurveError, ValueError):
    """An operation needs data the caller did not supply."""


class ModelSpecError(ForwardCurveError, ValueError):
    """A coefficient model was specified with invalid parameters."""


class CevParameterError(ModelSpecError):
    """CEV exponent outside the admissible range."""


class DegenerateCorrelationError(ForwardCurveError, ValueError):
    """A volatility coefficient vanishes, so the correlation is undefined."""


class StepError(ForwardCurveError, RuntimeError):
    """A time step could not be taken; carries the step diagnostics."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BlowUpError(StepError):
    """The state left the finite or norm-bounded region."""


class CouplingError(ForwardCurveError, ValueError):
    """Preconditions for comparing coupled runs are not met."""


class ConfigError(ForwardCurveError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.line = line
        self.column = column
