"""Deterministic duality utilities.

``dual_min`` evaluates ``V(r) = inf_{gamma > 0} g(gamma) + r^2 / (divisor * gamma)``
on a grid with a derivative-free refinement, ``slope_at_zero`` extrapolates
``(V(r) - g(0)) / r`` to ``r = 0`` and ``strong_duality_check`` compares
``sup {psi(x): phi(x) <= r}`` with ``inf_{lambda > 0} H(lambda) + lambda r``
on a finite set by exact enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InvalidArgument

#: gamma grid used when none is supplied
DEFAULT_GAMMA_GRID = np.logspace(-8, 2, 201)


@dataclass(frozen=True)
class ScalarCurve:
    """A function ``g`` on ``[0, inf)``, optionally with its derivative at 0.

    ``g`` may be vectorised or scalar; :meth:`__call__` always returns a
    float array. With ``monotone=True`` the curve is declared nondecreasing
    and :meth:`check` verifies it on the probe points.
    """

    g: Callable
    derivative_at_zero: float | None = None
    monotone: bool = False
    name: str = "g"

    def __call__(self, gamma) -> np.ndarray:
        gam = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
        try:
            out = np.asarray(self.g(gam), dtype=np.float64)
            if out.shape != gam.shape:
                raise ValueError
        except (TypeError, ValueError):
            out = np.array([float(self.g(float(x))) for x in gam])
        return out

    def value(self, gamma: float) -> float:
        return float(self(gamma)[0])

    def check(self, probes) -> None:
        v = self(probes)
        if not np.all(np.isfinite(v)):
            raise InvalidArgument(f"{self.name} is not finite on every probe point")
        if self.monotone and np.any(np.diff(v) < -1e-12 * np.maximum(1.0, np.abs(v[:-1]))):
            raise InvalidArgument(f"{self.name} declared nondecreasing but decreases on the probes")


@dataclass(frozen=True)
class DualMinimum:
    value: float
    gamma: float
    at_boundary: bool = False
    grid_value: float = np.nan

    def __iter__(self):
        # unpacks as (value, gamma*)
        yield self.value
        yield self.gamma


def _as_curve(g) -> ScalarCurve:
    return g if isinstance(g, ScalarCurve) else ScalarCurve(g)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidArgument("gamma grid must be a non-empty 1-D array")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InvalidArgument("gamma grid must be strictly positive and ascending")
    return grid


def dual_min(g, r: float, grid=None, divisor: float = 1.0, refine: str = "golden") -> DualMinimum:
    """Minimise ``g(gamma) + r^2 / (divisor * gamma)`` over ``gamma > 0``.

    The grid minimum is refined inside the cell ``[grid[k-1], grid[k+1]]``
    around the grid argmin ``k``: by golden-section search on the objective
    (``refine="golden"``) or by the vertex of the parabola through the three
    bracketing grid values (``refine="quadratic"``, for curves known only on
    the grid). The refined value never exceeds the grid value. A minimum at
    either end of the grid is reported with ``at_boundary=True`` and is not
    refined. At ``r = 0`` the grid minimum of ``g`` is returned as is.
    """
    if not r >= 0:
        raise InvalidArgument(f"radius must be >= 0, got {r}")
    if not divisor > 0:
        raise InvalidArgument(f"divisor must be positive, got {divisor}")
    curve = _as_curve(g)
    grid = _check_grid(DEFAULT_GAMMA_GRID if grid is None else grid)
    gv = curve(grid)
    if not np.all(np.isfinite(gv)):
        bad = int(np.flatnonzero(~np.isfinite(gv))[0])
        raise InvalidArgument(f"g is not finite at gamma={grid[bad]:.6g}")
    pen = r * r / divisor
    h = gv + pen / grid
    k = int(np.argmin(h))
    best, gbest = float(h[k]), float(grid[k])
    boundary = k == 0 or k == grid.size - 1
    if r == 0 or boundary:
        return DualMinimum(best, gbest, boundary, best)

    a, b, c = grid[k - 1], grid[k], grid[k + 1]
    if refine == "golden":
        def obj(x):
            return curve.value(x) + pen / x

        try:
            res = minimize_scalar(obj, bracket=(a, b, c), method="golden",
                                  options={"xtol": 1e-12})
            if a <= res.x <= c and res.fun < best:
                best, gbest = float(res.fun), float(res.x)
        except ValueError:
            pass  # flat objective: no strict bracket, keep the grid value
    elif refine == "quadratic":
        ha, hb, hc = h[k - 1], h[k], h[k + 1]
        denom = (b - a) * (hb - hc) - (b - c) * (hb - ha)
        if denom != 0:
            x = b - 0.5 * ((b - a) ** 2 * (hb - hc) - (b - c) ** 2 * (hb - ha)) / denom
            if a < x < c:
                # Lagrange form of the interpolating parabola at its vertex
                val = (ha * (x - b) * (x - c) / ((a - b) * (a - c))
                       + hb * (x - a) * (x - c) / ((b - a) * (b - c))
                       + hc * (x - a) * (x - b) / ((c - a) * (c - b)))
                if val < best:
                    best, gbest = float(val), float(x)
    else:
        raise InvalidArgument(f"unknown refinement {refine!r}")
    return DualMinimum(best, gbest, False, float(h[k]))


@dataclass(frozen=True)
class SlopeEstimate:
    value: float
    ladder: np.ndarray
    quotients: np.ndarray  # (V(r) - g(0)) / r along the ladder
    closed_form_value: float | None = None
    abs_error: float | None = None


def slope_at_zero(g, r_ladder, grid=None, divisor: float = 1.0) -> SlopeEstimate:
    """Right derivative of ``V`` at 0 from difference quotients on ``r_ladder``.

    ``U(r) = (V(r) - g(0)) / r`` is fitted by a straight line in ``r`` and
    the intercept is returned. When ``g`` carries ``derivative_at_zero`` the
    closed-form value ``2 sqrt(g'(0) / divisor)`` and the absolute error
    against it are reported as well.
    """
    curve = _as_curve(g)
    ladder = np.asarray(r_ladder, dtype=np.float64)
    if ladder.ndim != 1 or ladder.size < 3:
        raise InvalidArgument("the r ladder needs at least 3 points")
    if np.any(ladder <= 0):
        raise InvalidArgument("ladder radii must be positive")
    g0 = curve.value(0.0)
    U = np.array([(dual_min(curve, r, grid, divisor).value - g0) / r for r in ladder])
    _, intercept = np.polyfit(ladder, U, 1)
    exact = err = None
    if curve.derivative_at_zero is not None:
        exact = 2.0 * np.sqrt(max(curve.derivative_at_zero, 0.0) / divisor)
        err = abs(float(intercept) - exact)
    return SlopeEstimate(float(intercept), ladder, U, exact, err)


@dataclass(frozen=True)
class DualityReport:
    primal: float
    dual: float
    gap: float
    lam: float  # a minimising lambda (0.0 for the lambda -> 0+ limit)
    diagnostics: dict = field(default_factory=dict)


def strong_duality_check(psi, phi, r: float, lambda_grid=None) -> DualityReport:
    """Compare the constrained supremum with its Lagrangian dual on a finite set.

    ``H(lambda) = max_x psi(x) - lambda phi(x)`` is convex and piecewise
    linear, so ``H(lambda) + lambda r`` is minimised at ``lambda -> 0+``, at
    a pairwise breakpoint, or (only when nothing is feasible) at infinity.
    Those candidates are enumerated exactly; ``lambda_grid`` adds further
    probe points. An empty feasible set gives ``primal = -inf``.
    """
    psi = np.asarray(psi, dtype=np.float64).ravel()
    phi = np.asarray(phi, dtype=np.float64).ravel()
    if psi.shape != phi.shape or psi.size == 0:
        raise InvalidArgument("psi and phi must be non-empty and of equal length")
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(phi))):
        raise InvalidArgument("psi and phi must be finite")
    if np.any(phi < 0):
        raise InvalidArgument("phi must be nonnegative")
    if not r >= 0:
        raise InvalidArgument(f"radius must be >= 0, got {r}")

    diag: dict = {}
    feasible = phi <= r
    primal = float(psi[feasible].max()) if feasible.any() else -np.inf
    if not feasible.any():
        diag["empty_feasible_set"] = True

    dpsi = psi[:, None] - psi[None, :]
    dphi = phi[:, None] - phi[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        brk = dpsi / dphi
    cand = brk[np.isfinite(brk) & (brk > 0)]
    if lambda_grid is not None:
        lg = np.asarray(lambda_grid, dtype=np.float64)
        cand = np.concatenate([cand, lg[lg > 0]])
    cand = np.unique(np.concatenate([[0.0], cand]))

    def dual_obj(lam):
        return float(np.max(psi - lam * phi)) + lam * r

    vals = np.array([dual_obj(l) for l in cand])
    j = int(np.argmin(vals))
    dual, lam = float(vals[j]), float(cand[j])
    if not feasible.any():
        # every phi exceeds r: the dual objective decreases without bound
        dual, lam = -np.inf, np.inf
    gap = dual - primal if np.isfinite(primal) else (0.0 if dual == primal else np.inf)
    diag["n_candidates"] = int(cand.size)
    return DualityReport(primal, dual, float(gap), lam, diag)
