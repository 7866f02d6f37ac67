"""Reflected BSDEs below an upper obstacle.

``dY = Z.dX + dK - f(Y, Z) dt``, ``Y <= xi``, ``int (Y - xi) dK = 0``. The
discrete scheme projects the regression continuation value onto the
constraint, ``Y_i = min(C_i, xi_i)``, and books the residual
``C_i - Y_i >= 0`` as the push of ``K`` at node ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .bsde import (STIFF_SWEEPS, BasisSpec, BsdeSolution, ObstacleSpec, backward_sweep,
                   obstacle_from_table, polynomial_basis)
from .generators import GeneratorSpec
from .paths import PathEnsemble, mean_and_se

__all__ = ["ObstacleSpec", "RbsdeSolution", "solve_rbsde", "hitting_time", "HittingSummary",
           "stopping_boundary", "obstacle_from_table"]

HIT_ATOL = 1e-8
HIT_RTOL = 1e-3


@dataclass
class RbsdeSolution(BsdeSolution):
    """Adds ``K`` (``K[:, 0] = 0``, ``K[:, i] = sum_{j<i} dK[:, j]``), the obstacle
    table, the per-node hit tolerance and the first hitting index ``hit``."""

    K: np.ndarray | None = None
    dK: np.ndarray | None = None
    obstacle: np.ndarray | None = None
    hit: np.ndarray | None = None
    hit_tol: np.ndarray | None = None

    def contact(self, i: int) -> np.ndarray:
        """Paths on which the obstacle binds at node ``i``."""
        return self.obstacle[:, i] - self.Y[:, i] <= self.hit_tol[i]


def hit_tolerance(gap: np.ndarray) -> np.ndarray:
    """``1e-8 + 1e-3 * std`` of ``xi - Y`` per node."""
    return HIT_ATOL + HIT_RTOL * gap.std(axis=0)


def solve_rbsde(f: GeneratorSpec, obstacle: ObstacleSpec, ens: PathEnsemble,
                basis: BasisSpec | None = None, stiff: bool = False, workers: int = 1) -> RbsdeSolution:
    """Solve ``RBSDE(f, xi)`` and extract the first hitting index of the obstacle."""
    basis = basis or polynomial_basis()
    table = obstacle.table(ens)
    n = ens.n_steps
    Y, Z, drv, dK, diag = backward_sweep(f, ens, basis, table[:, n], obstacle=table,
                                         sweeps=STIFF_SWEEPS if stiff else 0, workers=workers)
    K = np.zeros_like(Y)
    K[:, 1:] = np.cumsum(dK, axis=1)
    gap = table - Y
    tol = hit_tolerance(gap)
    hit = kernels.first_hit(gap, tol)
    rows = np.arange(ens.n_paths)
    live = np.arange(n)[None, :] < hit[:, None]
    path = table[rows, hit] + ens.dt * np.where(live, drv, 0.0).sum(axis=1)
    _, se = mean_and_se(path)
    diag["reflected_fraction"] = float((dK > 0).any(axis=1).mean())
    diag["kinked_generator"] = bool(f.kinked)
    return RbsdeSolution(Y, Z, ens, f, float(Y[:, 0].mean()), se, drv, path, diagnostics=diag,
                         K=K, dK=dK, obstacle=table, hit=hit, hit_tol=tol)


@dataclass(frozen=True)
class HittingSummary:
    hit: np.ndarray
    counts: np.ndarray  # counts[i] = number of paths first hitting at node i

    @property
    def distribution(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def stopped_before_T(self) -> float:
        return float(self.counts[:-1].sum() / self.counts.sum())


def hitting_time(sol: RbsdeSolution) -> HittingSummary:
    n = sol.ens.n_steps
    return HittingSummary(sol.hit, np.bincount(sol.hit, minlength=n + 1))


def stopping_boundary(x: np.ndarray, contact: np.ndarray, side: str = "below") -> float | None:
    """Threshold ``b`` best separating ``{x <= b}`` (contact) from ``{x > b}``.

    Chosen to minimise the number of misclassified paths, which ignores
    isolated contacts produced by polynomial tails. ``side="above"`` handles
    stopping regions of the form ``{x >= b}``. Returns ``None`` when no path
    is in contact.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(contact, dtype=bool)
    if not c.any():
        return None
    if side == "above":
        b = stopping_boundary(-x, c, "below")
        return None if b is None else -b
    order = np.argsort(x, kind="stable")
    xs, cs = x[order], c[order]
    cum_c = np.concatenate([[0], np.cumsum(cs)])
    cum_nc = np.concatenate([[0], np.cumsum(~cs)])
    errors = cum_nc + (cum_c[-1] - cum_c)  # split after k sorted points
    k = int(np.argmin(errors))
    if k == 0:
        return None
    if k == xs.shape[0]:
        return float(xs[-1])
    return float(0.5 * (xs[k - 1] + xs[k]))
