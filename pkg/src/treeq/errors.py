"""Exception types raised across the package."""


class TreeqError(Exception):
    """Base class for all package errors."""


# -- topology / parameter validation ----------------------------------------

class CycleDetected(TreeqError):
    """Activity graph contains a cycle."""


class Disconnected(TreeqError):
    """Activity graph is not connected."""


class RateEdgeMismatch(TreeqError):
    """Positive service rate off an activity edge, or zero rate on one."""


class NonpositiveRate(TreeqError):
    """A rate or server fraction violates its sign constraint."""


class SchemaError(TreeqError):
    """Malformed or unsupported serialized artifact."""


# -- static fluid solve ------------------------------------------------------

class NotCriticallyLoaded(TreeqError):
    """The arrival rates are inconsistent with full utilization of every station."""


class NonBasicActivity(TreeqError):
    """The fluid allocation routes no mass through some activity."""


class NegativeAllocation(TreeqError):
    """The fluid allocation has a negative component."""


# -- flow primitives ---------------------------------------------------------

class MarginMismatch(TreeqError):
    """Class margins and station margins have different totals."""


class NegativeComponent(TreeqError):
    """A vector that must be nonnegative has a negative entry."""


class MalformedState(TreeqError):
    """A routing state violates its balance relations."""


class HypothesisViolated(TreeqError):
    """Inputs to the gap bound do not satisfy its hypotheses."""


# -- diffusion control -------------------------------------------------------

class GridTooSmall(TreeqError):
    """Truncated solver domain visibly influences values at the probe points."""


class NoConvergence(TreeqError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, iterations, residual):
        super().__init__(f"no convergence after {iterations} iterations, residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


class EmptyNeighborhood(TreeqError):
    """Mollification stencil contains no lattice points."""


class StepTooLarge(TreeqError):
    """Euler step too coarse for the drift's Lipschitz constant."""


# -- simulation --------------------------------------------------------------

class InfeasibleRearrangement(TreeqError):
    """Feedback rearrangement produced a negative service count (scale too small)."""


class InvariantBroken(TreeqError):
    """Internal state audit failed; always a bug, never a model state."""


class NegativePopulation(TreeqError):
    """Requested initial condition yields a negative population at the configured scale."""


class IoFailure(TreeqError):
    """Report emission failed."""
