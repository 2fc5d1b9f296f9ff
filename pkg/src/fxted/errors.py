"""Exception types shared across the package."""


class FxtError(Exception):
    """Base class for all package errors."""


class ParseError(FxtError):
    """Raised when an input file cannot be parsed or is missing a field."""


class ValidationError(FxtError):
    """Raised when parsed data violates a model invariant."""


class NonSymmetric(FxtError):
    pass


class DisconnectedTopology(FxtError):
    pass


class Infeasible(FxtError):
    """Total demand lies outside [sum p_min, sum p_max]."""


class AllSaturated(FxtError):
    """Every generator is pinned at a limit, so no free set remains."""

    def __init__(self, msg: str, P=None):
        super().__init__(msg)
        self.P = P


class NotConverged(FxtError):
    pass


class MaxIterations(FxtError):
    pass
