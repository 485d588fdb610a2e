"""Exception types shared across the planner."""


class PipefillError(Exception):
    """Base class for all planner errors."""


class ParseError(PipefillError):
    """A profile or plan document is structurally malformed."""


class ValidationError(PipefillError):
    """A parsed object violates one of its invariants."""


class ExtrapolationError(PipefillError):
    """A cost lookup fell outside the profiled batch-size range."""


class InfeasibleError(PipefillError):
    """No stage partition satisfies the requested configuration."""


class OracleTooLargeError(PipefillError):
    """The brute-force oracle was asked to enumerate beyond its guards."""


class NoFeasiblePlanError(PipefillError):
    """Every point of a hyper-parameter search space was infeasible."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])
