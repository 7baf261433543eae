"""Exception types raised across the toolkit."""


class TpmsError(Exception):
    """Base class for all toolkit errors."""


# geometry
class NonMonotoneBracket(TpmsError, ValueError):
    pass


class CalibrationRangeExceeded(TpmsError, ValueError):
    pass


class EmptySurface(TpmsError, ValueError):
    pass


# meshing
class DomainNotDivisible(TpmsError, ValueError):
    pass


class EmptyMesh(TpmsError, ValueError):
    pass


class ZeroEdge(TpmsError, ValueError):
    pass


class InvalidMesh(TpmsError, ValueError):
    pass


class NoSpanningComponent(TpmsError, ValueError):
    pass


# finite elements
class NonPositiveJacobian(TpmsError, ValueError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class NoTopFace(TpmsError, ValueError):
    pass


class NoBottomFace(TpmsError, ValueError):
    pass


class UnconstrainedRigidBody(TpmsError, ValueError):
    pass


class NoConvergence(TpmsError, RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


# convergence analytics
class ZeroReference(TpmsError, ValueError):
    pass


class NonMonotoneTriple(TpmsError, ValueError):
    pass


class ZeroDifference(TpmsError, ValueError):
    pass


class DegenerateOrder(TpmsError, ValueError):
    pass


class ZeroGci(TpmsError, ValueError):
    pass


class NonPositivePoint(TpmsError, ValueError):
    pass


class DegenerateFit(TpmsError, ValueError):
    pass


# configuration
class ConfigError(TpmsError, ValueError):
    pass


class StageFailure(TpmsError, RuntimeError):
    """A pipeline stage failed for one (h, MJ) point; wraps the cause."""

    def __init__(self, stage, h, mj, cause):
        self.stage, self.h, self.mj, self.cause = stage, h, mj, cause
        super().__init__(f"stage '{stage}' failed at (h={h:g} mm, MJ={mj:g}): "
                         f"{type(cause).__name__}: {cause}")
