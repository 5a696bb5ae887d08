"""Tube-based robust NMPC for underwater vehicle-manipulator force control."""

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyResult,
    GimbalLock,
    Infeasible,
    InfeasibleGains,
    InputConstraintViolation,
    MaxIter,
    NotStabilizable,
    NumericalFailure,
    SingularOrientation,
    TubeViolation,
    UnsupportedCombination,
    UvmsError,
)

__version__ = "0.1.0"
