"""Exception types shared across the package.

Every class carries a short ``code`` that the CLI writes into error rows.
"""

from __future__ import annotations


class DrbsdeError(Exception):
    code = "error"


class InvalidArgument(DrbsdeError, ValueError):
    code = "invalid-argument"


class InvalidState(DrbsdeError, RuntimeError):
    code = "invalid-state"


class NumericFailure(DrbsdeError, ArithmeticError):
    code = "numeric-failure"

    def __init__(self, message: str, path_index: int | None = None, time_index: int | None = None):
        super().__init__(message)
        self.path_index = path_index
        self.time_index = time_index


class RegressionFailure(NumericFailure):
    code = "regression-failure"


class AssumptionViolation(DrbsdeError, ValueError):
    code = "assumption-violation"


def first_nonfinite(values) -> int | None:
    """Index of the first row holding a non-finite entry, or None."""
    import numpy as np

    arr = np.asarray(values)
    bad = ~np.isfinite(arr)
    if arr.ndim > 1:
        bad = bad.reshape(arr.shape[0], -1).any(axis=1)
    if not bad.any():
        return None
    return int(np.flatnonzero(bad)[0])
