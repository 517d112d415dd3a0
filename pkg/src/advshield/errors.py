"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/validation
errors exit 2, an infeasible defense plan exits 3.
"""


class AdvShieldError(Exception):
    """Base class for all package errors."""


class ValidationError(AdvShieldError, ValueError):
    """Invalid argument or malformed input data."""


class ShapeError(ValidationError):
    """Tensor shape does not match what a layer or network expects."""


class ArchParseError(ValidationError):
    """Architecture string could not be parsed.

    Carries the token position so the caller can point at the offending
    token.
    """

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class IdxError(ValidationError):
    """Malformed IDX binary file."""


class IdxMagicError(IdxError):
    """IDX file carries a magic number other than the expected one."""


class IdxTruncatedError(IdxError):
    """IDX payload is shorter than the header promises."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the number of samples."""


class DivergenceError(AdvShieldError):
    """Defender fine-tuning diverged (center regularizer blew up)."""


class InsufficientProfileError(ValidationError):
    """Too few benign samples in a class to profile thresholds."""


class CalibrationError(AdvShieldError):
    """Reliability estimation is undefined because the defender flagged
    nothing; enlarge the calibration sets."""


class InfeasiblePlanError(AdvShieldError):
    """No defense layout satisfies the resource budget.

    ``binding`` names the constraint that ruled out every candidate:
    one of ``"dsp"``, ``"memory"``, ``"latency"``.
    """

    def __init__(self, message, binding):
        super().__init__(message)
        self.binding = binding
