"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` so the command line can map failures
onto its documented codes (3 data error, 4 numeric error).
"""


class ModensError(Exception):
    exit_code = 1


class DataError(ModensError):
    exit_code = 3


class NumericError(ModensError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError, ValueError):
    """Input outside an operation's mathematical domain."""


class ShapeError(DataError, ValueError):
    pass


class TensorFormatError(DataError):
    code = "format"


class BadMagic(TensorFormatError):
    code = "bad_magic"


class VersionMismatch(TensorFormatError):
    code = "version"


class Truncated(TensorFormatError):
    code = "truncated"


class BadDtype(TensorFormatError):
    code = "dtype"


class TrainingDivergence(NumericError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class UnsupportedPerturbation(ModensError, ValueError):
    pass
