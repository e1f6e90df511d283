"""Exception types raised by the simulator."""


class LocsimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(LocsimError, ValueError):
    """Invalid geometry, case file or parameter."""


class NumericalError(LocsimError, ArithmeticError):
    """A thermodynamic or algebraic routine hit an invalid state."""


class InfeasibleSplitError(NumericalError):
    """Rachford-Rice has no root in the feasible window."""


class FlashFailure(NumericalError):
    """Successive substitution did not converge."""


class AssemblyError(LocsimError):
    """Cell state is inconsistent with its phase status."""


class LinearSolverError(LocsimError):
    """The Jacobian could not be factorized.

    ``cell`` holds the cell index of the offending pivot when it can be
    identified, otherwise -1.
    """

    def __init__(self, message, cell=-1):
        super().__init__(message)
        self.cell = cell


class ConvergenceFailure(LocsimError):
    """Nonlinear iteration cap reached; the driver should cut the timestep."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
