"""Exception hierarchy shared by all modules."""


class TDVError(Exception):
    pass


class ShapeError(TDVError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ContractError(TDVError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(TDVError, ArithmeticError):
    """A numerical routine broke down (non-SPD system, runaway step size, ...)."""


class TrainingDiverged(NumericalError):
    pass


class UsageError(TDVError):
    """Bad command line or run configuration."""
