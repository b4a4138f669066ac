"""Exception types raised across the package."""


class FlowSurpriseError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FlowSurpriseError, ValueError):
    pass


class UndefinedCorrelation(FlowSurpriseError, ValueError):
    """Rank correlation requested for a series with zero rank variance."""


class TrainingDiverged(FlowSurpriseError, FloatingPointError):
    pass


class NoConvergence(FlowSurpriseError, RuntimeError):
    """The ODE solver hit its step budget before reaching the end time."""


class NumericalBlowup(FlowSurpriseError, FloatingPointError):
    pass


class CorruptDataset(FlowSurpriseError, IOError):
    pass


class CorruptCheckpoint(FlowSurpriseError, IOError):
    pass
