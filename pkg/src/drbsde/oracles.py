"""Independent dynamic-programming oracle for one-dimensional optimal stopping.

``binomial_stopping`` computes ``inf_tau E[g(tau, X_tau)]`` for a Brownian
motion ``X`` on a recombining lattice with steps ``+-sqrt(dt)``, together
with the exercise boundary at every level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .errors import InvalidArgument

MIN_TREE_STEPS = 2000


@dataclass(frozen=True)
class TreeOracle:
    value: float
    T: float
    n_steps: int
    boundary: np.ndarray  # per level, nan where no node exercises
    side: str

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def boundary_at(self, t: float) -> float:
        """Exercise boundary at the lattice level nearest to ``t``."""
        k = int(np.clip(round(t / self.T * self.n_steps), 0, self.n_steps))
        return float(self.boundary[k])


def _boundary_below(stop: np.ndarray, x: np.ndarray, dx: float) -> float:
    """Top of the exercise run that starts at the lowest node, half a cell above it."""
    if not stop[0]:
        return np.nan
    run = int(np.argmin(stop)) if not stop.all() else stop.size
    return float(x[run - 1] + dx)


def binomial_stopping(g: Callable[[float, np.ndarray], np.ndarray], T: float,
                      n_steps: int = MIN_TREE_STEPS, side: str = "below",
                      exercise_dates: int | None = None) -> TreeOracle:
    """Snell envelope (infimum) of ``g`` on a symmetric binomial lattice.

    ``g(t, x)`` must accept an array of states. ``side`` states where the
    exercise region lies: ``"below"`` (``{x <= b(t)}``) or ``"above"``.
    The boundary at level ``k`` is half a lattice cell beyond the last
    exercising node of the run that starts at the extreme node on that side.

    With ``exercise_dates=m`` stopping is allowed only on the ``m + 1``
    equally spaced dates ``j T / m`` (``n_steps`` must be a multiple of
    ``m``): the Bermudan problem a scheme with ``m`` time steps solves.
    Levels between dates report the boundary of the next date.
    """
    if n_steps < MIN_TREE_STEPS:
        raise InvalidArgument(f"the tree oracle needs at least {MIN_TREE_STEPS} steps, got {n_steps}")
    if side not in ("below", "above"):
        raise InvalidArgument(f"side must be 'below' or 'above', got {side!r}")
    if not T > 0:
        raise InvalidArgument(f"horizon must be positive, got T={T}")
    M = int(n_steps)
    dt = T / M
    dx = np.sqrt(dt)
    table = np.zeros((M + 1, M + 1))
    for k in range(M + 1):
        x = (2.0 * np.arange(k + 1) - k) * dx
        table[k, : k + 1] = np.asarray(g(k * dt, x), dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise InvalidArgument("obstacle is not finite on the lattice")
    allowed = np.ones(M + 1, dtype=np.uint8)
    if exercise_dates is not None:
        if exercise_dates < 1 or M % exercise_dates:
            raise InvalidArgument(f"n_steps={M} is not a multiple of exercise_dates={exercise_dates}")
        allowed[:] = 0
        allowed[:: M // exercise_dates] = 1
    v0, stop = kernels.stopping_tree(table, allowed)

    bnd = np.full(M + 1, np.nan)
    for k in range(M + 1):
        x = (2.0 * np.arange(k + 1) - k) * dx
        s = stop[k, : k + 1].astype(bool)
        if side == "below":
            bnd[k] = _boundary_below(s, x, dx)
        else:
            b = _boundary_below(s[::-1], -x[::-1], dx)
            bnd[k] = -b if np.isfinite(b) else np.nan
    if exercise_dates is not None:
        step = M // exercise_dates
        for k in range(M + 1):
            bnd[k] = bnd[min(M, -(-k // step) * step)]
    return TreeOracle(float(v0), float(T), M, bnd, side)
