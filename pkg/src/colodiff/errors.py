"""Exception hierarchy shared by every module."""


class ColodiffError(Exception):
    """Base class for all package errors."""


class DimensionError(ColodiffError, ValueError):
    """Operand shapes or ranks are incompatible."""


class ParameterError(ColodiffError, ValueError):
    """An argument is outside its documented domain."""


class ContractError(ColodiffError, RuntimeError):
    """A caller violated an API precondition (e.g. non-scalar loss)."""


class NumericalError(ColodiffError, ArithmeticError):
    """A primitive produced NaN/Inf or hit a numerical singularity."""


class TrainingDivergence(NumericalError):
    """The training loss became non-finite."""
