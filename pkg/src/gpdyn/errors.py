"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad or insufficient
input data) and :class:`NumericalError` (a computation could not be
completed).  The command line maps them to exit codes 3 and 4.
"""


class GPDynError(Exception):
    """Base class for all package errors."""


class DataError(GPDynError, ValueError):
    """Input data violates a precondition."""


class NumericalError(GPDynError, ArithmeticError):
    """A numerical procedure failed."""


# kernels / gp
class NonIncreasingTimes(DataError):
    pass


class OptimizationFailed(NumericalError):
    pass


class ConditioningFailed(NumericalError):
    pass


# inference_linear
class NonFiniteTerm(NumericalError):
    def __init__(self, term, row):
        self.term = term
        self.row = row
        super().__init__(f"dictionary term {term!r} is not finite at row {row}")


class SingularSystem(NumericalError):
    pass


class AllTermsPruned(NumericalError):
    pass


class IndexMapMismatch(DataError):
    pass


class ZeroTruthNorm(DataError):
    pass


# inference_mcmc
class ShapeMismatch(DataError):
    pass


class NonFiniteInit(NumericalError):
    pass


# dynamics
class NewtonDivergence(NumericalError):
    def __init__(self, step, state, message=None):
        self.step = step
        self.state = state
        super().__init__(message or f"Newton iteration diverged at step {step}, state {state}")


class StepSizeUnderflow(NumericalError):
    pass


class AllDrawsDiverged(NumericalError):
    pass


class DomainViolation(NumericalError):
    pass


# dataio
class EmptyTrainingSet(DataError):
    pass


class DegenerateGrid(DataError):
    pass


class WindowTooLarge(DataError):
    pass


class NonUniformGrid(DataError):
    pass
