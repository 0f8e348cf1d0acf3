"""Exception types shared across the protocol engine."""


class Wino2pcError(Exception):
    """Base class for engine errors."""


class ShapeMismatch(Wino2pcError):
    pass


class ParamMismatch(Wino2pcError):
    pass


class InvalidWidths(Wino2pcError):
    pass


class UnreachableTarget(Wino2pcError):
    pass


class UnsupportedPlan(Wino2pcError):
    pass


class OverflowRisk(Wino2pcError):
    pass


class AccumulatorTooNarrow(Wino2pcError):
    pass


class ScaleUnalignable(Wino2pcError):
    pass


class DegenerateStd(Wino2pcError):
    pass


class NonFiniteLoss(Wino2pcError):
    pass


class Infeasible(Wino2pcError):
    pass


class InvariantViolation(Wino2pcError):
    """A protocol run broke one of its checked invariants."""


class GraphError(Wino2pcError):
    """Malformed or inconsistent protocol graph."""
