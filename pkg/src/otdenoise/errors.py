"""Exception hierarchy shared by every module."""


class OTDenoiseError(Exception):
    """Base class for all errors raised by this package."""


class EmptySample(OTDenoiseError):
    pass


class DimError(OTDenoiseError):
    pass


class MeasureError(OTDenoiseError):
    """A weight vector or plan violates its invariants."""


class ConvergeError(OTDenoiseError):
    """An iterative solver hit its iteration cap.

    The last iterate is kept on ``last`` so callers can inspect or reuse it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class ZeroRow(OTDenoiseError):
    pass


class DomainError(OTDenoiseError):
    pass


class Unsupported(OTDenoiseError):
    pass


class Degenerate(OTDenoiseError):
    pass


class MatrixError(OTDenoiseError):
    pass


class LowDensity(OTDenoiseError):
    pass


class InfeasibleSample(OTDenoiseError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class AlignError(OTDenoiseError):
    pass


class Infeasible(OTDenoiseError):
    pass


class SolverError(OTDenoiseError):
    """The LP backend reported a failure other than infeasibility."""


class ConfigError(OTDenoiseError):
    """Malformed experiment configuration (CLI exit code 2)."""
