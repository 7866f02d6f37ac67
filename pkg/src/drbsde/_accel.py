"""Numba switch.

Kernels are compiled with numba when it is importable, unless the
environment variable ``DRBSDE_DISABLE_NUMBA`` is set to a truthy value, in
which case the pure-numpy implementations run instead. The flag is read at
every dispatch so tests can flip it with ``monkeypatch.setenv``.
"""

from __future__ import annotations

import os

DISABLE_ENV = "DRBSDE_DISABLE_NUMBA"

try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get(DISABLE_ENV, "").strip().lower()
    return HAVE_NUMBA and flag not in {"1", "true", "yes", "on"}


def njit(func):
    if not HAVE_NUMBA:
        return func
    return _numba.njit(cache=True, nogil=True)(func)
