"""Least-squares Monte Carlo solver for BSDEs.

Convention: ``dY = Z.dX - f(Y, Z) dt``, ``Y_T = xi``. The backward Euler step
on grid node ``i`` is

    Ytil_i = E[Y_{i+1} | F_i]
    Z_i    = E[(Y_{i+1} - Ytil_i) dX_i | F_i] / dt
    Y_i    = Ytil_i + dt * f(t_i, Ytil_i, Z_i)

with conditional expectations replaced by a global ridge regression on
polynomial features of a user-declared state. Subtracting ``Ytil_i`` in the
``Z`` target leaves its conditional mean unchanged and removes the
``Y_{i+1}``-level noise; it also makes constants exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericFailure, RegressionFailure, first_nonfinite
from .generators import GeneratorSpec
from .paths import PathEnsemble, broadcast_drift, mean_and_se

COND_LIMIT = 1e12
DEFAULT_RIDGE = 1e-8
STIFF_SWEEPS = 3

StateFn = Callable[[int, PathEnsemble], np.ndarray]


# --------------------------------------------------------------------------
# regression basis


def brownian_state(i: int, ens: PathEnsemble) -> np.ndarray:
    return ens.values_tm[i]


def brownian_and_integral_state(i: int, ens: PathEnsemble) -> np.ndarray:
    """``(X^1_t, int_0^t X^1 ds)``, the state of path-dependent Asian-type payoffs."""
    return np.column_stack([ens.values_tm[i, :, 0], ens.running_integral[:, i, 0]])


STATES: dict[str, StateFn] = {"x": brownian_state, "x_int": brownian_and_integral_state}


def monomial_exponents(n_vars: int, degree: int) -> np.ndarray:
    """All exponent vectors of total degree <= ``degree``; row 0 is the constant."""
    rows = [np.zeros(n_vars, dtype=np.int64)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_vars), deg):
            e = np.zeros(n_vars, dtype=np.int64)
            for v in combo:
                e[v] += 1
            rows.append(e)
    return np.array(rows, dtype=np.int64)


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial features of ``state(i, ens)`` plus optional extra columns."""

    state: StateFn = brownian_state
    degree: int = 3
    ridge: float = DEFAULT_RIDGE
    extra: StateFn | None = None
    name: str = "poly"

    def __post_init__(self):
        if self.degree < 0:
            raise InvalidArgument("basis degree must be >= 0")
        if self.ridge < 0:
            raise InvalidArgument("ridge must be >= 0")

    def features(self, i: int, ens: PathEnsemble) -> np.ndarray:
        s = np.asarray(self.state(i, ens), dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        F = kernels.poly_features(s, monomial_exponents(s.shape[1], self.degree))
        if self.extra is not None:
            ex = np.asarray(self.extra(i, ens), dtype=np.float64)
            F = np.column_stack([F, ex.reshape(ens.n_paths, -1)])
        return F


def hinge_features(knots, component: int = 0) -> StateFn:
    """Columns ``max(X^c_t - k, 0)`` for each knot ``k``: a piecewise-linear
    refinement of a polynomial basis where the target has a kink."""
    kn = np.asarray(knots, dtype=np.float64).ravel()
    if kn.size == 0:
        raise InvalidArgument("hinge basis needs at least one knot")

    def fn(i: int, ens: PathEnsemble) -> np.ndarray:
        x = ens.values_tm[i, :, component]
        return np.maximum(x[:, None] - kn[None, :], 0.0)

    return fn


def _stack_extras(*fns: StateFn | None) -> StateFn | None:
    fns = [f for f in fns if f is not None]
    if not fns:
        return None
    if len(fns) == 1:
        return fns[0]

    def fn(i: int, ens: PathEnsemble) -> np.ndarray:
        return np.column_stack([np.asarray(f(i, ens), dtype=np.float64).reshape(ens.n_paths, -1)
                                for f in fns])

    return fn


def polynomial_basis(degree: int = 3, state: str | StateFn = "x", ridge: float = DEFAULT_RIDGE,
                     extra: StateFn | None = None, knots=None) -> BasisSpec:
    """Monomials up to ``degree`` in ``state``, then ``extra`` columns, then hinges at ``knots``."""
    if isinstance(state, str):
        if state not in STATES:
            raise InvalidArgument(f"unknown basis state {state!r}; known: {sorted(STATES)}")
        fn, label = STATES[state], state
    else:
        fn, label = state, getattr(state, "__name__", "custom")
    hinge = None if knots is None else hinge_features(knots)
    name = f"poly{degree}[{label}]" + ("" if knots is None else f"+hinge{len(np.ravel(knots))}")
    return BasisSpec(fn, degree, ridge, _stack_extras(extra, hinge), name=name)


class _Projector:
    """Ridge regression onto centred, standardised features with a free intercept."""

    def __init__(self, F: np.ndarray, ridge: float, i: int, workers: int = 1):
        self.i = i
        self.workers = workers
        n = F.shape[0]
        C = F[:, 1:]
        if C.shape[1]:
            mu = C.mean(axis=0)
            sd = C.std(axis=0)
            keep = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
            C = (C[:, keep] - mu[keep]) / sd[keep]
        self.C = C
        if C.shape[1] == 0:
            self.A = None
            return
        G, _ = kernels.gram(C, workers=workers)
        A = G + ridge * n * np.eye(C.shape[1])
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise RegressionFailure(f"normal equations singular at time index {i} (cond={cond:.3g})",
                                    time_index=i)
        self.A = A

    def fit(self, t: np.ndarray) -> np.ndarray:
        # anchor at t[0] so that a constant target is reproduced exactly
        t0 = t[0]
        tbar = t0 + (t - t0).mean(axis=0)
        if self.A is None:
            return np.broadcast_to(tbar, t.shape).copy()
        _, R = kernels.gram(self.C, t - tbar, workers=self.workers)
        beta = np.linalg.solve(self.A, R)
        out = tbar + self.C @ beta
        return out.reshape(t.shape)


# --------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal condition ``xi(path)``.

    ``integrability`` is a declared tag: ``"bounded"``, ``"square_integrable"``
    or ``None`` (undeclared).
    """

    payoff: Callable[[PathEnsemble], np.ndarray]
    integrability: str | None = "square_integrable"
    bound: float | None = None
    name: str = "terminal"

    def __call__(self, ens: PathEnsemble) -> np.ndarray:
        v = np.asarray(self.payoff(ens), dtype=np.float64)
        bad = first_nonfinite(v)
        if bad is not None:
            raise NumericFailure(f"terminal value non-finite on path {bad}", path_index=bad)
        return v


@dataclass(frozen=True)
class ObstacleSpec:
    """Obstacle ``xi(t_i, path)`` with an optional separate terminal value ``xi_T``.

    ``value(i, ens)`` is evaluated for ``i < n``; the last node uses
    ``terminal(ens)`` when given, else ``value(n, ens)``. Continuity on
    ``[0, T)`` is the caller's responsibility.
    """

    value: Callable[[int, PathEnsemble], np.ndarray]
    terminal: Callable[[PathEnsemble], np.ndarray] | None = None
    integrability: str | None = None
    bound: float | None = None
    name: str = "obstacle"

    def at(self, i: int, ens: PathEnsemble) -> np.ndarray:
        if i == ens.n_steps and self.terminal is not None:
            v = self.terminal(ens)
        else:
            v = self.value(i, ens)
        return np.broadcast_to(np.asarray(v, dtype=np.float64), (ens.n_paths,))

    def table(self, ens: PathEnsemble) -> np.ndarray:
        out = np.empty((ens.n_paths, ens.n_steps + 1))
        for i in range(ens.n_steps + 1):
            out[:, i] = self.at(i, ens)
        bad = first_nonfinite(out)
        if bad is not None:
            raise NumericFailure(f"obstacle non-finite on path {bad}", path_index=bad)
        return out

    def as_terminal(self) -> TerminalSpec:
        return TerminalSpec(lambda ens: self.at(ens.n_steps, ens), self.integrability, self.bound,
                            name=f"{self.name}@T")


def obstacle_from_table(table: np.ndarray, integrability: str | None = "bounded",
                        name: str = "tabulated") -> ObstacleSpec:
    """Obstacle given directly as an ``(n_paths, n_steps + 1)`` array."""
    tab = np.asarray(table, dtype=np.float64)
    if tab.ndim != 2:
        raise InvalidArgument(f"obstacle table must be (n_paths, n_steps + 1), got shape {tab.shape}")
    return ObstacleSpec(lambda i, ens: tab[:, i], integrability=integrability, name=name)


@dataclass
class BsdeSolution:
    """Per-path, per-node solution.

    ``Y`` has shape ``(n_paths, n_steps + 1)``; ``Z`` has shape
    ``(n_paths, n_steps + 1, dim)`` with ``Z[:, n] = 0`` (no step starts at
    ``T``). ``driver[:, i]`` holds the generator value used on step ``i`` and
    ``pathwise`` the realised per-path value whose mean is ``y0`` and whose
    spread gives ``y0_se``.
    """

    Y: np.ndarray
    Z: np.ndarray
    ens: PathEnsemble
    generator: GeneratorSpec
    y0: float
    y0_se: float
    driver: np.ndarray
    pathwise: np.ndarray
    tau: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# backward recursion


def _check_step(i: int, *arrays):
    for a in arrays:
        bad = first_nonfinite(a)
        if bad is not None:
            raise NumericFailure(f"non-finite value at time index {i}, path {bad}",
                                 path_index=bad, time_index=i)


def _continuation(f, i, ens, proj, nxt, dX, sweeps):
    ytil = proj.fit(nxt)
    z = proj.fit((nxt - ytil)[:, None] * dX / ens.dt)
    drv = f.evaluate(i, ens, ytil, z)
    y = ytil + ens.dt * drv
    for _ in range(sweeps):
        drv = f.evaluate(i, ens, y, z)
        y = ytil + ens.dt * drv
    return y, z, drv


def backward_sweep(f: GeneratorSpec, ens: PathEnsemble, basis: BasisSpec, terminal: np.ndarray, *,
                   obstacle: np.ndarray | None = None, sweeps: int = 0, workers: int = 1,
                   tau: np.ndarray | None = None, frozen: np.ndarray | None = None):
    """Shared backward loop.

    With ``obstacle`` (an ``(n_paths, n+1)`` table) the value is projected
    below it on every node; with ``tau`` each path is frozen at
    ``frozen[p, tau[p]]`` from its stopping index on. Returns
    ``(Y, Z, driver, reflection, diagnostics)``.
    """
    N, n, d = ens.n_paths, ens.n_steps, ens.dim
    # time-major work arrays: each node is a contiguous row
    Y = np.empty((n + 1, N))
    Z = np.zeros((n + 1, N, d))
    drv = np.zeros((n, N))
    dK = np.zeros((n, N))
    obs = None if obstacle is None else np.ascontiguousarray(obstacle.T)
    Y[n] = terminal
    degenerate = []
    for i in range(n - 1, -1, -1):
        F = basis.features(i, ens)
        dX = ens.increments_tm[i]
        nxt = Y[i + 1]
        if tau is None:
            proj = _Projector(F, basis.ridge, i, workers)
            y, Z[i], drv[i] = _continuation(f, i, ens, proj, nxt, dX, sweeps)
        else:
            live = tau > i
            y = frozen[np.arange(N), tau].copy()
            n_live = int(live.sum())
            if n_live == N:
                proj = _Projector(F, basis.ridge, i, workers)
                y, Z[i], drv[i] = _continuation(f, i, ens, proj, nxt, dX, sweeps)
            elif n_live > 0:
                rows = np.flatnonzero(live)
                if n_live <= F.shape[1]:
                    degenerate.append(i)
                    F_live = F[rows, :1]
                else:
                    F_live = F[rows]
                sub = _SubEnsemble(ens, rows)
                proj = _Projector(F_live, basis.ridge, i, workers)
                ys, Z[i, rows], drv[i, rows] = _continuation(f, i, sub, proj, nxt[rows], dX[rows], sweeps)
                y[rows] = ys
            else:
                degenerate.append(i)
        if obs is not None:
            yr = np.minimum(y, obs[i])
            dK[i] = y - yr
            y = yr
        _check_step(i, y, Z[i])
        Y[i] = y
    diag = {"degenerate_regression_steps": degenerate} if degenerate else {}
    return (np.ascontiguousarray(Y.T), np.ascontiguousarray(Z.transpose(1, 0, 2)),
            np.ascontiguousarray(drv.T), np.ascontiguousarray(dK.T), diag)


class _SubEnsemble:
    """Row-restricted view handed to drivers evaluated on a subset of paths."""

    def __init__(self, ens: PathEnsemble, rows: np.ndarray):
        self._ens = ens
        self.rows = rows
        self.grid = ens.grid
        self.dim = ens.dim
        self.dt = ens.dt
        self.n_steps = ens.n_steps
        self.n_paths = rows.shape[0]
        self.seed = ens.seed

    @property
    def values(self):
        return self._ens.values[self.rows]

    @property
    def increments(self):
        return self._ens.increments[self.rows]

    @property
    def running_integral(self):
        return self._ens.running_integral[self.rows]

    @property
    def values_tm(self):
        return self._ens.values_tm[:, self.rows]

    @property
    def increments_tm(self):
        return self._ens.increments_tm[:, self.rows]

    def at(self, i):
        return self._ens.values[self.rows, i, :]


def _pathwise(terminal_like, drv, stop, dt):
    N, n = drv.shape
    live = np.arange(n)[None, :] < stop[:, None]
    return terminal_like + dt * np.where(live, drv, 0.0).sum(axis=1)


def solve_bsde(f: GeneratorSpec, xi: TerminalSpec, ens: PathEnsemble, basis: BasisSpec | None = None,
               stiff: bool = False, workers: int = 1) -> BsdeSolution:
    """Solve ``BSDE(f, xi)`` on ``ens`` by backward regression.

    ``stiff=True`` adds three fixed-point sweeps in ``y`` per step.
    """
    basis = basis or polynomial_basis()
    term = xi(ens) if isinstance(xi, TerminalSpec) else np.asarray(xi, dtype=np.float64)
    Y, Z, drv, _, diag = backward_sweep(f, ens, basis, term, sweeps=STIFF_SWEEPS if stiff else 0,
                                        workers=workers)
    path = _pathwise(Y[:, -1], drv, np.full(ens.n_paths, ens.n_steps), ens.dt)
    y0 = float(Y[:, 0].mean())
    _, se = mean_and_se(path)
    diag.setdefault("kinked_generator", bool(f.kinked))
    return BsdeSolution(Y, Z, ens, f, y0, se, drv, path, diagnostics=diag)


def solve_bsde_random_terminal(f: GeneratorSpec, obstacle: ObstacleSpec, tau, ens: PathEnsemble,
                               basis: BasisSpec | None = None, stiff: bool = False,
                               workers: int = 1) -> BsdeSolution:
    """Solve ``BSDE_tau(f, xi)``: terminal value ``xi_tau`` at a per-path grid index ``tau``.

    Paths are frozen after their own ``tau`` (``Y = xi_tau``, ``Z = 0``) and
    each regression uses only paths still running.
    """
    basis = basis or polynomial_basis()
    tau = np.asarray(tau, dtype=np.int64)
    n = ens.n_steps
    if tau.shape != (ens.n_paths,) or tau.min() < 0 or tau.max() > n:
        raise InvalidArgument(f"tau must be per-path grid indices in [0, {n}]")
    table = obstacle.table(ens)
    Y, Z, drv, _, diag = backward_sweep(f, ens, basis, table[:, n], sweeps=STIFF_SWEEPS if stiff else 0,
                                        workers=workers, tau=tau, frozen=table)
    stopped = table[np.arange(ens.n_paths), tau]
    path = _pathwise(stopped, drv, tau, ens.dt)
    _, se = mean_and_se(path)
    return BsdeSolution(Y, Z, ens, f, float(Y[:, 0].mean()), se, drv, path, tau=tau, diagnostics=diag)


# --------------------------------------------------------------------------
# linear BSDEs by exponential weights


def _track(arr, shape, what):
    a = np.asarray(arr, dtype=np.float64)
    try:
        return np.broadcast_to(a, shape)
    except ValueError as exc:
        raise InvalidArgument(f"{what} of shape {a.shape} does not fit {shape}") from exc


def linear_bsde_pathwise(a_track, b_track, c_track, ens: PathEnsemble, stop=None) -> np.ndarray:
    """Per-path ``sum_{i < stop} Gamma_i c_i dt``.

    ``Gamma_i = exp(sum_{j<i} a_j dt) * E(-sum_{j<i} b_j.dX_j)``: the
    discount from ``a`` times the density of ``P^b``. The mean is the time-0
    value of ``dU = V.dX - (a U - b.V + c) dt``, ``U_stop = 0``.
    """
    N, n, d = ens.n_paths, ens.n_steps, ens.dim
    a = _track(a_track, (N, n), "a_track")
    b = broadcast_drift(b_track, ens)
    c = _track(c_track, (N, n), "c_track")
    for name, arr in (("a_track", a), ("b_track", b), ("c_track", c)):
        bad = first_nonfinite(arr)
        if bad is not None:
            raise NumericFailure(f"{name} non-finite on path {bad}", path_index=bad)
    stop = np.full(N, n, dtype=np.int64) if stop is None else np.asarray(stop, dtype=np.int64)
    if stop.shape != (N,) or stop.min() < 0 or stop.max() > n:
        raise InvalidArgument(f"stop must be per-path indices in [0, {n}]")
    totals = kernels.weighted_sum(a, b, c, ens.increments, ens.dt, stop)
    bad = first_nonfinite(totals)
    if bad is not None:
        raise NumericFailure(f"exponential weight non-finite on path {bad}", path_index=bad)
    return totals


def solve_linear_bsde_weights(a_track, b_track, c_track, ens: PathEnsemble, stop=None) -> tuple[float, float]:
    """Time-0 value and standard error of the linear BSDE, see :func:`linear_bsde_pathwise`."""
    return mean_and_se(linear_bsde_pathwise(a_track, b_track, c_track, ens, stop))
