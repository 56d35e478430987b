"""Exception types raised across the package."""


class SharedTransferError(Exception):
    """Base class for all package errors."""


class ShapeError(SharedTransferError, ValueError):
    """Array dimensions do not agree."""


class DegenerateCovariate(SharedTransferError, ValueError):
    """A covariate has too few distinct values to support the requested basis."""


class SingularSystem(SharedTransferError, ArithmeticError):
    """An unregularized normal-equation system could not be factorized."""


class ZeroAtom(SharedTransferError, ValueError):
    """A dictionary atom has zero norm where a nonzero atom is required."""


class BudgetExceeded(SharedTransferError, RuntimeError):
    """An exhaustive search would enumerate too many candidates."""


class DataError(SharedTransferError, ValueError):
    """Input data is malformed (bad CSV, NaN responses, ragged tasks)."""


class VersionError(SharedTransferError, ValueError):
    """A persisted model has an unsupported format version."""
