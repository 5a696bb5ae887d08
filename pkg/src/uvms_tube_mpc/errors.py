"""Exception hierarchy shared by all modules."""


class UvmsError(Exception):
    """Base class for every error raised by this package."""

    #: short stage name reported by the CLI on failure
    stage = "uvms"


class SingularOrientation(UvmsError):
    """Euler-rate transform requested at pitch +-pi/2."""

    stage = "kinematics"


class GimbalLock(SingularOrientation):
    """Euler angles cannot be extracted uniquely from a rotation matrix."""


class DimensionMismatch(UvmsError, ValueError):
    stage = "sets"


class UnsupportedCombination(UvmsError, TypeError):
    stage = "sets"


class EmptyResult(UvmsError):
    """A Pontryagin difference eroded the set away."""

    stage = "tightening"


class InfeasibleGains(UvmsError):
    stage = "gains"


class NumericalFailure(UvmsError, ArithmeticError):
    stage = "numerics"


class InputConstraintViolation(UvmsError):
    stage = "feedback"

    def __init__(self, message, margin=None):
        super().__init__(message)
        self.margin = margin


class TubeViolation(UvmsError):
    stage = "feedback"


class NotStabilizable(UvmsError):
    stage = "terminal"


class Infeasible(UvmsError):
    stage = "fhocp"

    def __init__(self, message, violation=None):
        super().__init__(message)
        self.violation = violation


class MaxIter(UvmsError):
    stage = "fhocp"


class ConfigError(UvmsError, ValueError):
    stage = "config"
