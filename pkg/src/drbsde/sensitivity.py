"""First-order robust sensitivities and their finite-difference oracles.

Closed-form estimators
    ``sensitivity_linf_bsde`` evaluates ``E[int_0^T Gamma_s |Z_s| ds]`` for a
    general driver. The control and mixed estimators reweight to the
    optimally controlled measure ``P^{lam*}`` and discount by ``K*``, with
    the integral stopped at the first hitting index for obstacle problems.

Oracles
    ``robust_value_fd`` solves the problem with driver ``f + r|z|`` on the
    same ensemble and returns the difference quotient; ``fd_sensitivity``
    adds the Richardson combination ``2 slope(r/2) - slope(r)``.
    ``dual_curve`` samples ``G(gamma)``, the value under ``f + gamma|z|^2``,
    for the L2 case.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .bsde import (BasisSpec, BsdeSolution, ObstacleSpec, TerminalSpec, linear_bsde_pathwise,
                   polynomial_basis, solve_bsde)
from .dualtools import ScalarCurve, dual_min
from .errors import AssumptionViolation, InvalidArgument, NumericFailure
from .generators import (Z_KINK, ControlledCoefficients, GeneratorSpec, hamiltonian, negated,
                         optimal_coefficients, quadratic_robustify, robustify, trivial_coefficients)
from .paths import PathEnsemble, mean_and_se, stochastic_exponential
from .rbsde import RbsdeSolution, solve_rbsde

log = logging.getLogger(__name__)

METHODS = ("closed_form", "finite_difference", "dual_curve")
PROBLEMS = ("bsde", "control", "mixed")
N_BANDS = 4
DEFAULT_FD_RADIUS = 0.05
DEFAULT_DUAL_GRID = np.logspace(-3, 1, 25)


@dataclass(frozen=True)
class SensitivityReport:
    value: float
    std_error: float
    method: str
    radius: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method tag {self.method!r}")
        if not np.isfinite(self.value):
            raise InvalidArgument(f"sensitivity value is not finite ({self.value})")
        if not (self.std_error >= 0):
            raise InvalidArgument(f"standard error must be >= 0, got {self.std_error}")


# --------------------------------------------------------------------------
# helpers


def _z_norm(sol: BsdeSolution) -> tuple[np.ndarray, np.ndarray]:
    """``|Z_i|`` on steps ``i < n`` and the mask of kink steps (``|Z| < Z_KINK``)."""
    n = sol.ens.n_steps
    zn = np.linalg.norm(sol.Z[:, :n], axis=2)
    kink = zn < Z_KINK
    return np.where(kink, 0.0, zn), kink


def _bands(per_step: np.ndarray, dt: float) -> list[float]:
    """Path-averaged ``sum(per_step) * dt`` over ``N_BANDS`` consecutive time bands."""
    cols = np.array_split(np.arange(per_step.shape[1]), N_BANDS)
    return [float(per_step[:, c].sum(axis=1).mean() * dt) for c in cols if c.size]


def _live(stop: np.ndarray, n: int) -> np.ndarray:
    return np.arange(n)[None, :] < stop[:, None]


def _stopped_bands(stop: np.ndarray, n: int) -> list[float]:
    """Fraction of paths stopped by the end of each time band."""
    edges = [c[-1] + 1 for c in np.array_split(np.arange(n), N_BANDS) if c.size]
    return [float((stop < e).mean()) for e in edges]


def _terminal_spec(xi) -> TerminalSpec:
    if isinstance(xi, TerminalSpec):
        return xi
    if callable(xi):
        return TerminalSpec(xi)
    raise InvalidArgument("terminal must be a TerminalSpec or a callable of the ensemble")


def _require_tag(obstacle: ObstacleSpec, need_bounded: bool = False):
    tag = obstacle.integrability
    if tag is None:
        raise AssumptionViolation(
            f"obstacle {obstacle.name!r} declares no integrability; the sensitivity needs a "
            "square-integrable (or bounded) obstacle")
    if need_bounded and tag != "bounded":
        raise AssumptionViolation(
            f"obstacle {obstacle.name!r} is declared {tag!r}; the L2 stopping sensitivity needs "
            "a bounded obstacle")


# --------------------------------------------------------------------------
# general driver


def _linf_from_solution(f: GeneratorSpec, sol: BsdeSolution) -> SensitivityReport:
    ens = sol.ens
    n = ens.n_steps
    a = np.empty((ens.n_paths, n))
    b = np.empty((ens.n_paths, n, ens.dim))
    for i in range(n):
        y, z = sol.Y[:, i], sol.Z[:, i]
        a[:, i] = f.d_y(i, ens, y, z)
        b[:, i] = -f.d_z(i, ens, y, z)
    c, kink = _z_norm(sol)
    b[kink] = 0.0
    per_path = linear_bsde_pathwise(a, b, c, ens)
    value, se = mean_and_se(per_path)
    diag = {
        "y0": sol.y0, "y0_se": sol.y0_se,
        "z_l1_bands": _bands(c, ens.dt),
        "discount_mass": float(np.exp(a.sum(axis=1) * ens.dt).mean()),
        "kink_fraction": float(kink.mean()),
        "kinked_generator": bool(f.kinked),
    }
    return SensitivityReport(value, se, "closed_form", 0.0, diag)


def sensitivity_linf_bsde(f: GeneratorSpec, xi, ens: PathEnsemble, basis: BasisSpec | None = None,
                          direction: str = "sup", stiff: bool = False, workers: int = 1,
                          solution: BsdeSolution | None = None) -> SensitivityReport:
    """Derivative at ``r = 0`` of ``Y_0`` under the driver ``f + r|z|``.

    The linearised equation ``dU = V.dX - (d_y f U + d_z f.V + |Z|) dt`` is
    evaluated with exponential weights on the same ensemble. With
    ``direction="inf"`` the mirrored problem ``(-f(-y, -z), -xi)`` is solved
    and the result negated, which gives the derivative of the infimum over
    the drift ball, ``-E[int Gamma |Z|]``.
    """
    if direction not in ("sup", "inf"):
        raise InvalidArgument(f"direction must be 'sup' or 'inf', got {direction!r}")
    xi = _terminal_spec(xi)
    if direction == "inf":
        mirrored = TerminalSpec(lambda e: -xi(e), xi.integrability, xi.bound, name=f"-{xi.name}")
        rep = sensitivity_linf_bsde(negated(f), mirrored, ens, basis, "sup", stiff, workers)
        return replace(rep, value=-rep.value, diagnostics={**rep.diagnostics, "direction": "inf"})
    sol = solution or solve_bsde(f, xi, ens, basis or polynomial_basis(), stiff=stiff, workers=workers)
    rep = _linf_from_solution(f, sol)
    return replace(rep, diagnostics={**rep.diagnostics, "direction": "sup"})


# --------------------------------------------------------------------------
# control and mixed problems


def _check_bounds(coeffs: ControlledCoefficients, lam: np.ndarray, k: np.ndarray):
    lam_max = float(np.linalg.norm(lam, axis=2).max()) if lam.size else 0.0
    if coeffs.lambda_bound is not None and lam_max > coeffs.lambda_bound * (1 + 1e-9) + 1e-12:
        raise AssumptionViolation(
            f"optimal drift reaches {lam_max:.6g}, above the declared bound {coeffs.lambda_bound}")
    k_max = float(np.abs(k).max()) if k.size else 0.0
    if coeffs.k_bound is not None and k_max > coeffs.k_bound * (1 + 1e-9) + 1e-12:
        raise AssumptionViolation(
            f"optimal discount rate reaches {k_max:.6g}, above the declared bound {coeffs.k_bound}")
    return lam_max


def _controlled_norm(coeffs: ControlledCoefficients, f: GeneratorSpec, sol: BsdeSolution,
                     power: int, stop: np.ndarray) -> SensitivityReport:
    ens = sol.ens
    n, dt = ens.n_steps, ens.dt
    track = optimal_coefficients(f, sol)
    zn, kink = _z_norm(sol)
    lam = np.where(kink[:, :, None], 0.0, track.lam)
    lam_max = _check_bounds(coeffs, lam, track.k)

    live = _live(stop, n)
    integrand = np.where(live, track.discount[:, :n] * zn**power, 0.0)
    payoff = integrand.sum(axis=1) * dt
    weights = stochastic_exponential(-lam, ens)
    inner, inner_se = mean_and_se(weights * payoff)

    # the same quantity with the Gamma weight stopped at each step, under P^0
    gam = linear_bsde_pathwise(-track.k, lam, zn**power, ens, stop)
    g_val, g_se = mean_and_se(gam)
    comb = float(np.hypot(inner_se, g_se))

    clipped = inner < 0
    if power == 1:
        value, se = inner, inner_se
    else:
        root = np.sqrt(max(inner, 0.0))
        value = float(root)
        se = float(inner_se / (2.0 * root)) if root > 0 else 0.0

    diag = {
        "y0": sol.y0, "y0_se": sol.y0_se,
        "power": power,
        "inner": inner, "inner_se": inner_se,
        "z_norm_bands": _bands(integrand, dt),
        "discount_mass": float(track.discount[:, n].mean()),
        "weight_mean": float(weights.mean()),
        "lambda_star_max": lam_max,
        "stopped_fraction": float((stop < n).mean()),
        "stopped_fraction_bands": _stopped_bands(stop, n),
        "gamma_weight_value": g_val, "gamma_weight_se": g_se,
        "measure_crosscheck_z": float(abs(inner - g_val) / comb) if comb > 0 else 0.0,
        "clipped_negative": bool(clipped),
        "kinked_generator": bool(f.kinked),
    }
    return SensitivityReport(float(value), float(se), "closed_form", 0.0, diag)


def _control(coeffs, xi, ens, basis, stiff, workers, power, solution):
    f = hamiltonian(coeffs)
    xi = _terminal_spec(xi)
    sol = solution or solve_bsde(f, xi, ens, basis or polynomial_basis(), stiff=stiff, workers=workers)
    rep = _controlled_norm(coeffs, f, sol, power, np.full(ens.n_paths, ens.n_steps, dtype=np.int64))
    return replace(rep, diagnostics={**rep.diagnostics,
                                     "terminal_declared_bounded": xi.integrability == "bounded"})


def sensitivity_linf_control(coeffs: ControlledCoefficients, xi, ens: PathEnsemble,
                             basis: BasisSpec | None = None, stiff: bool = False, workers: int = 1,
                             solution: BsdeSolution | None = None) -> SensitivityReport:
    """``E^{lam*}[int_0^T K*_s |Z_s| ds]`` for the Hamiltonian of ``coeffs``.

    Raises :class:`AssumptionViolation` when the optimal drift or discount
    exceeds the declared bounds. The diagnostics carry the same expectation
    computed with step-wise Gamma weights under ``P^0`` and the z-score of
    the difference.
    """
    return _control(coeffs, xi, ens, basis, stiff, workers, 1, solution)


def sensitivity_l2_control(coeffs: ControlledCoefficients, xi, ens: PathEnsemble,
                           basis: BasisSpec | None = None, stiff: bool = False, workers: int = 1,
                           solution: BsdeSolution | None = None) -> SensitivityReport:
    """``(E^{lam*}[int_0^T K*_s |Z_s|^2 ds])^(1/2)``, standard error by the delta method.

    A terminal value not declared bounded is recorded in the diagnostics
    (``terminal_declared_bounded``) rather than rejected.
    """
    return _control(coeffs, xi, ens, basis, stiff, workers, 2, solution)


def _mixed(coeffs, obstacle, ens, basis, stiff, workers, power, solution):
    _require_tag(obstacle)
    f = hamiltonian(coeffs)
    sol = solution or solve_rbsde(f, obstacle, ens, basis or polynomial_basis(), stiff=stiff,
                                  workers=workers)
    rep = _controlled_norm(coeffs, f, sol, power, sol.hit)
    return replace(rep, diagnostics={**rep.diagnostics, "obstacle_integrability": obstacle.integrability})


def sensitivity_mixed_linf(coeffs: ControlledCoefficients, obstacle: ObstacleSpec, ens: PathEnsemble,
                           basis: BasisSpec | None = None, stiff: bool = False, workers: int = 1,
                           solution: RbsdeSolution | None = None) -> SensitivityReport:
    """``E^{lam*}[int_0^tau K*_s |Z_s| ds]`` with ``tau`` the first hit of the obstacle."""
    return _mixed(coeffs, obstacle, ens, basis, stiff, workers, 1, solution)


def sensitivity_mixed_l2(coeffs: ControlledCoefficients, obstacle: ObstacleSpec, ens: PathEnsemble,
                         basis: BasisSpec | None = None, stiff: bool = False, workers: int = 1,
                         solution: RbsdeSolution | None = None) -> SensitivityReport:
    """Stopped L2 counterpart of :func:`sensitivity_mixed_linf`."""
    return _mixed(coeffs, obstacle, ens, basis, stiff, workers, 2, solution)


def sensitivity_stopping(obstacle: ObstacleSpec, ens: PathEnsemble, basis: BasisSpec | None = None,
                         mode: str = "linf", workers: int = 1,
                         solution: RbsdeSolution | None = None) -> SensitivityReport:
    """Pure stopping: the mixed estimators with no control (zero driver).

    ``mode="l2"`` requires an obstacle declared ``"bounded"``.
    """
    if mode not in ("linf", "l2"):
        raise InvalidArgument(f"mode must be 'linf' or 'l2', got {mode!r}")
    _require_tag(obstacle, need_bounded=mode == "l2")
    fn = sensitivity_mixed_linf if mode == "linf" else sensitivity_mixed_l2
    return fn(trivial_coefficients(ens.dim), obstacle, ens, basis, workers=workers, solution=solution)


# --------------------------------------------------------------------------
# finite-difference oracle


def _generator_of(problem: str, model) -> GeneratorSpec:
    if problem not in PROBLEMS:
        raise InvalidArgument(f"problem must be one of {PROBLEMS}, got {problem!r}")
    if isinstance(model, GeneratorSpec):
        return model
    if isinstance(model, ControlledCoefficients):
        return hamiltonian(model)
    raise InvalidArgument("model must be a GeneratorSpec or ControlledCoefficients")


def _solver(problem: str, data, ens, basis, stiff, workers) -> Callable[[GeneratorSpec], BsdeSolution]:
    basis = basis or polynomial_basis()
    if problem == "mixed":
        if not isinstance(data, ObstacleSpec):
            raise InvalidArgument("the mixed problem needs an ObstacleSpec")
        return lambda g: solve_rbsde(g, data, ens, basis, stiff=stiff, workers=workers)
    term = _terminal_spec(data)
    return lambda g: solve_bsde(g, term, ens, basis, stiff=stiff, workers=workers)


@dataclass(frozen=True)
class RobustValue:
    value_r: float
    value_0: float
    slope: float
    std_error: float
    radius: float

    def __iter__(self):
        # unpacks as (V(r), V(0), slope)
        yield self.value_r
        yield self.value_0
        yield self.slope


def robust_value_fd(problem: str, model, data, r: float, ens: PathEnsemble,
                    basis: BasisSpec | None = None, stiff: bool = False, workers: int = 1,
                    base: BsdeSolution | None = None) -> RobustValue:
    """Solve the ``r``-robust and the nominal problem on the same paths.

    ``problem`` is ``"bsde"`` (``model`` a driver, ``data`` a terminal),
    ``"control"`` (``model`` controlled coefficients) or ``"mixed"``
    (``data`` an obstacle, solved as a reflected equation). The slope's
    standard error comes from the per-path difference of the two solutions.
    """
    if not (np.isfinite(r) and r > 0):
        raise InvalidArgument(f"finite-difference radius must be positive, got {r}")
    f = _generator_of(problem, model)
    solve = _solver(problem, data, ens, basis, stiff, workers)
    s0 = base or solve(f)
    sr = solve(robustify(f, r))
    _, se = mean_and_se((sr.pathwise - s0.pathwise) / r)
    return RobustValue(sr.y0, s0.y0, (sr.y0 - s0.y0) / r, se, float(r))


def fd_sensitivity(problem: str, model, data, ens: PathEnsemble, basis: BasisSpec | None = None,
                   r: float = DEFAULT_FD_RADIUS, richardson: bool = True, stiff: bool = False,
                   workers: int = 1) -> SensitivityReport:
    """Finite-difference slope at radius ``r``, Richardson-extrapolated from ``{r, r/2}`` by default."""
    if not (np.isfinite(r) and r > 0):
        raise InvalidArgument(f"finite-difference radius must be positive, got {r}")
    f = _generator_of(problem, model)
    solve = _solver(problem, data, ens, basis, stiff, workers)
    s0 = solve(f)
    sr = solve(robustify(f, r))
    d_r = (sr.pathwise - s0.pathwise) / r
    slope_r = (sr.y0 - s0.y0) / r
    diag = {"value_0": s0.y0, "slope_r": slope_r, "radius": r}
    if not richardson:
        _, se = mean_and_se(d_r)
        return SensitivityReport(slope_r, se, "finite_difference", r, diag)
    sh = solve(robustify(f, r / 2))
    d_h = (sh.pathwise - s0.pathwise) / (r / 2)
    slope_h = (sh.y0 - s0.y0) / (r / 2)
    _, se = mean_and_se(2.0 * d_h - d_r)
    diag["slope_r_half"] = slope_h
    return SensitivityReport(2.0 * slope_h - slope_r, se, "finite_difference", r, diag)


def richardson_slope(problem: str, model, data, r: float, ens: PathEnsemble,
                     basis: BasisSpec | None = None, **kw) -> float:
    """``2 slope(r/2) - slope(r)`` on common random numbers."""
    return fd_sensitivity(problem, model, data, ens, basis, r=r, richardson=True, **kw).value


# --------------------------------------------------------------------------
# L2 dual curve


@dataclass(frozen=True)
class DualCurve:
    """``G`` sampled on a positive grid, with its continuous extension ``G(0)``.

    ``dual_values[j]`` is ``min_gamma G(gamma) + r_j^2 / (divisor gamma)`` for
    ``radii[j]``, attained at ``gamma_star[j]``. ``secant`` estimates ``G'(0)``
    from the two smallest grid points.
    """

    gammas: np.ndarray
    G: np.ndarray
    G_se: np.ndarray
    G0: float
    G0_se: float
    radii: np.ndarray
    dual_values: np.ndarray
    gamma_star: np.ndarray
    at_boundary: np.ndarray
    divisor: float
    secant: float
    secant_se: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def implied_sensitivity(self) -> float:
        """``sqrt(G'(0))``: the L2 sensitivity implied by the secant."""
        return float(np.sqrt(max(self.secant, 0.0)))

    @property
    def closed_form_slope(self) -> float:
        """Right derivative of the dual value at 0 implied by the secant: ``2 sqrt(G'(0) / divisor)``."""
        return float(2.0 * np.sqrt(max(self.secant, 0.0) / self.divisor))

    def slopes(self) -> np.ndarray:
        """``(V(r) - G(0)) / r`` for the positive requested radii (``nan`` at ``r = 0``)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.radii > 0, (self.dual_values - self.G0) / self.radii, np.nan)


def dual_curve(problem: str = "control", model=None, data=None, ens: PathEnsemble | None = None,
               basis: BasisSpec | None = None, gamma_grid=None, radii=(), divisor: float = 4.0,
               g: Callable | None = None, stiff: bool = False, workers: int = 1) -> DualCurve:
    """Sample ``G(gamma) = Y_0`` under ``f + gamma|z|^2`` and minimise the dual objective.

    ``G(0)`` is the nominal solve. With ``g`` supplied, the Monte Carlo
    solves are skipped and ``G = g`` exactly (deterministic hook); the
    minimisation then refines by golden-section on ``g`` itself. Otherwise
    only grid values exist and the refinement is quadratic. A decrease of
    ``G`` between neighbours by more than three standard errors of the
    paired difference is logged and listed under ``monotonicity_violations``.
    Grid points where the solver fails numerically are kept as ``nan`` in
    ``G``, listed under ``solver_failures`` and left out of the minimisation.
    """
    grid = np.asarray(DEFAULT_DUAL_GRID if gamma_grid is None else gamma_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InvalidArgument("gamma grid must hold at least two strictly positive ascending values")
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    if np.any(~np.isfinite(radii)) or np.any(radii < 0):
        raise InvalidArgument("radii must be finite and >= 0")
    diag: dict = {}

    if g is not None:
        curve = ScalarCurve(g, name="external")
        G = curve(grid)
        G_se = np.zeros_like(G)
        G0, G0_se = curve.value(0.0), 0.0
        secant_se = 0.0
        refine = "golden"
        search = grid
        diag["source"] = "external"
    else:
        if ens is None:
            raise InvalidArgument("an ensemble is required unless g is supplied")
        f = _generator_of(problem, model)
        solve = _solver(problem, data, ens, basis, stiff, workers)
        base = solve(f)

        def at(gam):
            try:
                return solve(quadratic_robustify(f, float(gam)))
            except NumericFailure as exc:
                # the explicit quadratic scheme loses stability once gamma |Z| dt is large
                log.warning("G(%g) failed: %s", gam, exc)
                return None

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                sols = list(pool.map(at, grid))
        else:
            sols = [at(x) for x in grid]
        ok = np.array([s is not None for s in sols])
        if ok.sum() < 2 or not ok[:2].all():
            raise NumericFailure("G could not be evaluated at the two smallest gamma values")
        G = np.array([s.y0 if s is not None else np.nan for s in sols])
        G_se = np.array([s.y0_se if s is not None else np.nan for s in sols])
        G0, G0_se = base.y0, base.y0_se
        _, secant_se = mean_and_se((sols[1].pathwise - sols[0].pathwise) / (grid[1] - grid[0]))
        violations = []
        prev_val, prev_path = G0, base.pathwise
        for j in np.flatnonzero(ok):
            _, se_d = mean_and_se(sols[j].pathwise - prev_path)
            if G[j] < prev_val - 3.0 * se_d:
                violations.append(float(grid[j]))
            prev_val, prev_path = G[j], sols[j].pathwise
        if violations:
            log.warning("G decreases beyond 3 SE at gamma in %s", violations)
        diag["monotonicity_violations"] = violations
        diag["solver_failures"] = [float(x) for x in grid[~ok]]
        diag["source"] = "monte_carlo"
        xs = np.concatenate([[0.0], grid[ok]])
        ys = np.concatenate([[G0], G[ok]])
        curve = ScalarCurve(lambda x: np.interp(x, xs, ys), name="G")
        refine = "quadratic"
        search = grid[ok]

    secant = float((G[1] - G[0]) / (grid[1] - grid[0]))
    values, gstar, boundary = [], [], []
    for r in radii:
        if r == 0:
            values.append(G0)
            gstar.append(0.0)
            boundary.append(False)
            continue
        m = dual_min(curve, float(r), search, divisor, refine=refine)
        values.append(m.value)
        gstar.append(m.gamma)
        boundary.append(m.at_boundary)
    return DualCurve(grid, G, G_se, float(G0), float(G0_se), radii, np.array(values), np.array(gstar),
                     np.array(boundary, dtype=bool), float(divisor), secant, float(secant_se), diag)


def dual_sensitivity(curve: DualCurve) -> SensitivityReport:
    """The implied L2 sensitivity ``sqrt(G'(0))`` as a report (delta-method SE)."""
    val = curve.implied_sensitivity
    se = curve.secant_se / (2.0 * val) if val > 0 else 0.0
    return SensitivityReport(val, float(se), "dual_curve", 0.0,
                             {"secant": curve.secant, "G0": curve.G0, **curve.diagnostics})


# --------------------------------------------------------------------------
# first-order expansion of the robust optimal control


@dataclass(frozen=True)
class ControlExpansion:
    """``alpha^r`` computed directly and by its first-order expansion, per path and step.

    Arrays have shape ``(n_paths, n_steps, action_dim)``; ``U`` and ``V``
    solve the linearised equation.
    """

    r: float
    alpha_r: np.ndarray
    alpha_linear: np.ndarray
    alpha_0: np.ndarray
    U: np.ndarray
    V: np.ndarray
    rms_gap: float
    correction_rms: float


def _linearised_driver(a: np.ndarray, bz: np.ndarray, c: np.ndarray) -> GeneratorSpec:
    def ev(i, ens, u, v):
        return c[:, i] + a[:, i] * u + np.einsum("pd,pd->p", bz[:, i], v)

    def dy(i, ens, u, v):
        return a[:, i].copy()

    def dz(i, ens, u, v):
        return bz[:, i].copy()

    return GeneratorSpec(ev, dy, dz, name="linearised")


def control_expansion(coeffs: ControlledCoefficients, xi, r: float, ens: PathEnsemble,
                      basis: BasisSpec | None = None, stiff: bool = False,
                      workers: int = 1) -> ControlExpansion:
    """Compare ``alpha*(Y^r, Z^r)`` with ``alpha* + r (d_y alpha* U + d_z alpha* V)``.

    ``(Y^r, Z^r)`` solves the equation with driver ``f + r|z|``; ``(U, V)``
    solves the linear equation with driver
    ``|Z| + d_y f(Y, Z) u + d_z f(Y, Z).v`` and zero terminal value, on the
    same ensemble and basis.
    """
    if coeffs.alpha_star is None or coeffs.d_alpha_y is None or coeffs.d_alpha_z is None:
        raise InvalidArgument("control_expansion needs an analytic minimiser with its y and z derivatives")
    if not (np.isfinite(r) and r >= 0):
        raise InvalidArgument(f"radius must be >= 0, got {r}")
    basis = basis or polynomial_basis()
    xi = _terminal_spec(xi)
    f = hamiltonian(coeffs)
    sol = solve_bsde(f, xi, ens, basis, stiff=stiff, workers=workers)
    sol_r = sol if r == 0 else solve_bsde(robustify(f, r), xi, ens, basis, stiff=stiff, workers=workers)
    n, N = ens.n_steps, ens.n_paths

    a = np.empty((N, n))
    bz = np.empty((N, n, ens.dim))
    for i in range(n):
        a[:, i] = f.d_y(i, ens, sol.Y[:, i], sol.Z[:, i])
        bz[:, i] = f.d_z(i, ens, sol.Y[:, i], sol.Z[:, i])
    c, kink = _z_norm(sol)
    bz[kink] = 0.0
    lin = solve_bsde(_linearised_driver(a, bz, c), TerminalSpec(lambda e: np.zeros(e.n_paths)), ens, basis,
                     workers=workers)

    al0, alr, allin = [], [], []
    for i in range(n):
        y, z = sol.Y[:, i], sol.Z[:, i]
        a0 = np.asarray(coeffs.alpha_star(i, ens, y, z), dtype=np.float64)
        ar = np.asarray(coeffs.alpha_star(i, ens, sol_r.Y[:, i], sol_r.Z[:, i]), dtype=np.float64)
        dy = np.asarray(coeffs.d_alpha_y(i, ens, y, z), dtype=np.float64)
        dzv = np.asarray(coeffs.d_alpha_z(i, ens, y, z), dtype=np.float64)
        corr = dy * lin.Y[:, i][:, None] + np.einsum("pad,pd->pa", dzv, lin.Z[:, i])
        al0.append(a0)
        alr.append(ar)
        allin.append(a0 if r == 0 else a0 + r * corr)
    alpha_0 = np.stack(al0, axis=1)
    alpha_r = np.stack(alr, axis=1)
    alpha_lin = np.stack(allin, axis=1)
    gap = float(np.sqrt(np.mean((alpha_r - alpha_lin) ** 2)))
    corr_rms = float(np.sqrt(np.mean((alpha_lin - alpha_0) ** 2)))
    return ControlExpansion(float(r), alpha_r, alpha_lin, alpha_0, lin.Y, lin.Z, gap, corr_rms)
