"""Experiment configs: validation, built-in registries and execution of sweep cells.

A config is a JSON object::

    {
      "experiment_id": "portfolio-eta",
      "problem": "portfolio",
      "seed": 2024,
      "grid": {"T": 1.0, "n_steps": 50},
      "ensemble": {"n_paths": 32768, "dim": 1},
      "basis": {"degree": 3, "state": "x_int"},
      "estimators": ["Y0", "V0", "s_inf", "s_2"],
      "params": {"rho": 0.5},
      "sweep": {"eta": [0.5, 1, 2, 3, 4, 5]}
    }

Problems other than ``portfolio`` name their driver, coefficients, terminal
value or obstacle from the registries below, each as
``{"name": ..., "params": {...}}``. A sweep axis overrides the key of the
same name in ``params`` (or ``seed``, ``n_paths``, ``n_steps``, ``T``,
``degree``) for each cell; cells are the Cartesian product of the axes in
the order they are listed.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bsde, generators, sensitivity as sens
from .bsde import ObstacleSpec, TerminalSpec
from .errors import DrbsdeError, InvalidArgument
from .paths import make_grid, simulate_brownian
from .rbsde import solve_rbsde
from .scenarios import PortfolioConfig, markov_put_payoff, portfolio_scenario
from .oracles import MIN_TREE_STEPS, binomial_stopping

PROBLEMS = ("bsde", "control", "stopping", "mixed", "portfolio", "dual_curve", "fd_oracle")

ESTIMATORS: dict[str, tuple[str, ...]] = {
    "bsde": ("Y0", "linf_bsde", "linf_bsde_inf", "fd_linf"),
    "control": ("Y0", "linf_control", "l2_control", "fd_linf", "dual_l2"),
    "mixed": ("Y0", "mixed_linf", "mixed_l2", "fd_linf", "dual_l2"),
    "stopping": ("Y0", "stopping_linf", "stopping_l2", "tree_value"),
    "portfolio": ("Y0", "V0", "s_inf", "s_2"),
    "dual_curve": ("G0", "secant", "implied_l2", "dual_value", "l2_control"),
    "fd_oracle": ("closed_form", "finite_difference"),
}

GRID_AXES = ("seed", "n_paths", "n_steps", "T", "degree")
PORTFOLIO_PARAMS = ("eta", "rho", "liability", "stiff")


# --------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


class ConfigError(DrbsdeError):
    code = "config-error"

    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------
# registries: name -> builder(params) returning the object


def _generator(name: str, p: dict):
    if name == "zero":
        return generators.zero_generator()
    if name == "linear":
        return generators.linear_generator(float(p.get("a", 0.0)), p.get("b", 0.0), float(p.get("c", 0.0)))
    raise KeyError(name)


def _coefficients(name: str, p: dict, dim: int):
    if name == "trivial":
        return generators.trivial_coefficients(dim)
    if name == "constant":
        return generators.constant_coefficients(float(p.get("k", 0.0)), float(p.get("l", 0.0)),
                                                p.get("lam", 0.0), dim=dim)
    if name == "box_drift":
        return generators.box_drift_coefficients(float(p.get("scale", 1.0)), int(p.get("resolution", 101)),
                                                 bool(p.get("analytic", False)))
    if name == "softmin_drift":
        return generators.softmin_drift_coefficients(float(p.get("temperature", 0.05)))
    raise KeyError(name)


def _terminal(name: str, p: dict) -> TerminalSpec:
    if name == "x_T":
        s = float(p.get("scale", 1.0))
        return TerminalSpec(lambda e: s * e.values[:, -1, 0], "square_integrable", name="x_T")
    if name == "x_T_squared":
        return TerminalSpec(lambda e: e.values[:, -1, 0] ** 2, "square_integrable", name="x_T^2")
    if name == "constant":
        c = float(p.get("c", 1.0))
        return TerminalSpec(lambda e: np.full(e.n_paths, c), "bounded", abs(c), name="constant")
    if name == "positive_integral":
        return TerminalSpec(lambda e: np.maximum(e.running_integral[:, -1, 0], 0.0), "square_integrable",
                            name="(int X)^+")
    raise KeyError(name)


def _obstacle(name: str, p: dict):
    """Return ``(ObstacleSpec, markov payoff g(t, x) or None)``."""
    if name == "flat":
        c = float(p.get("level", 1.0))
        return ObstacleSpec(lambda i, e: np.full(e.n_paths, c), integrability="bounded", bound=abs(c),
                            name="flat"), None
    if name == "markov_put":
        g = markov_put_payoff(float(p.get("strike", 0.0)), float(p.get("rate", 2.0)), float(p.get("cap", 4.0)))
        return ObstacleSpec(lambda i, e: g(i * e.dt, e.values[:, i, 0]), integrability="bounded",
                            bound=float(p.get("cap", 4.0)), name="markov_put"), g
    if name == "abs_plus_one":
        return ObstacleSpec(lambda i, e: np.abs(e.values[:, i, 0]) + 1.0,
                            terminal=lambda e: np.abs(e.values[:, -1, 0]),
                            integrability="square_integrable", name="|x|+1"), None
    raise KeyError(name)


GENERATORS = ("zero", "linear")
COEFFICIENTS = ("trivial", "constant", "box_drift", "softmin_drift")
TERMINALS = ("x_T", "x_T_squared", "constant", "positive_integral")
OBSTACLES = ("flat", "markov_put", "abs_plus_one")


# --------------------------------------------------------------------------
# validation


def load(path: str | Path) -> dict:
    """Read a config file; raises :class:`ConfigError` when unreadable or not a JSON object."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError([Diagnostic("unreadable-config", f"cannot read {path}: {exc}")]) from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([Diagnostic("invalid-json", f"{path}: {exc}")]) from exc
    if not isinstance(cfg, dict):
        raise ConfigError([Diagnostic("invalid-json", "the config must be a JSON object")])
    return cfg


def _named(cfg: dict, key: str, known, out: list[Diagnostic], code: str):
    spec = cfg.get(key)
    if spec is None:
        out.append(Diagnostic(f"missing-{key}", f"problem {cfg.get('problem')!r} needs a {key!r} entry"))
        return
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        out.append(Diagnostic(f"invalid-{key}", f"{key!r} must be {{'name': ..., 'params': {{...}}}}"))
        return
    if spec["name"] not in known:
        out.append(Diagnostic(code, f"unknown {key} {spec['name']!r}; known: {list(known)}"))
    if not isinstance(spec.get("params", {}), dict):
        out.append(Diagnostic(f"invalid-{key}", f"{key}.params must be an object"))


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def check(cfg: dict) -> list[Diagnostic]:
    """All schema and referential problems of ``cfg`` (empty when valid)."""
    out: list[Diagnostic] = []
    problem = cfg.get("problem")
    if problem not in PROBLEMS:
        out.append(Diagnostic("unknown-problem", f"problem must be one of {list(PROBLEMS)}, got {problem!r}"))
    if "seed" not in cfg:
        out.append(Diagnostic("missing-seed", "a 'seed' (non-negative integer) is mandatory"))
    elif not _is_int(cfg["seed"]) or cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        out.append(Diagnostic("invalid-seed", f"seed must be a non-negative 64-bit integer, got {cfg['seed']!r}"))
    if "experiment_id" in cfg and not isinstance(cfg["experiment_id"], str):
        out.append(Diagnostic("invalid-experiment-id", "experiment_id must be a string"))

    grid = cfg.get("grid", {})
    ens = cfg.get("ensemble", {})
    basis = cfg.get("basis", {})
    for key, val in (("grid", grid), ("ensemble", ens), ("basis", basis), ("params", cfg.get("params", {}))):
        if not isinstance(val, dict):
            out.append(Diagnostic(f"invalid-{key}", f"{key!r} must be an object"))
    if out and any(d.code.startswith("invalid-") and d.code[8:] in ("grid", "ensemble", "basis", "params")
                   for d in out):
        return out
    T, n_steps = grid.get("T", 1.0), grid.get("n_steps", 50)
    if not isinstance(T, (int, float)) or isinstance(T, bool) or not T > 0:
        out.append(Diagnostic("invalid-grid", f"grid.T must be a positive number, got {T!r}"))
    if not _is_int(n_steps) or n_steps < 1:
        out.append(Diagnostic("invalid-grid", f"grid.n_steps must be a positive integer, got {n_steps!r}"))
    n_paths, dim = ens.get("n_paths", 2**14), ens.get("dim", 1)
    if not _is_int(n_paths) or n_paths < 2:
        out.append(Diagnostic("invalid-ensemble", f"ensemble.n_paths must be an integer >= 2, got {n_paths!r}"))
    if not _is_int(dim) or dim < 1:
        out.append(Diagnostic("invalid-ensemble", f"ensemble.dim must be a positive integer, got {dim!r}"))
    deg = basis.get("degree", 3)
    if not _is_int(deg) or deg < 0:
        out.append(Diagnostic("invalid-basis", f"basis.degree must be a non-negative integer, got {deg!r}"))
    if basis.get("state", "x") not in bsde.STATES:
        out.append(Diagnostic("unknown-basis-state",
                              f"basis.state must be one of {sorted(bsde.STATES)}, got {basis.get('state')!r}"))

    est = cfg.get("estimators")
    if not isinstance(est, list) or not est:
        out.append(Diagnostic("missing-estimators", "'estimators' must be a non-empty list"))
    elif problem in PROBLEMS:
        for e in est:
            if e not in ESTIMATORS[problem]:
                out.append(Diagnostic("unknown-estimator",
                                      f"unknown estimator {e!r} for problem {problem!r}; "
                                      f"known: {list(ESTIMATORS[problem])}"))
        if len(set(map(str, est))) != len(est):
            out.append(Diagnostic("duplicate-estimator", "each estimator may be listed once"))

    sweep = cfg.get("sweep", {})
    if not isinstance(sweep, dict):
        out.append(Diagnostic("invalid-sweep", "'sweep' must be an object of axis -> list"))
        sweep = {}
    params = cfg.get("params", {})
    for axis, values in sweep.items():
        if not isinstance(values, list) or not values:
            out.append(Diagnostic("empty-sweep-axis", f"sweep axis {axis!r} must be a non-empty list"))
        allowed = set(GRID_AXES) | set(params) | (set(PORTFOLIO_PARAMS) if problem == "portfolio" else set()) \
            | {"r", "gamma_max", "divisor"}
        if axis not in allowed:
            out.append(Diagnostic("unknown-sweep-axis",
                                  f"sweep axis {axis!r} matches neither a grid setting nor a key of 'params'"))

    if problem in ("bsde",):
        _named(cfg, "generator", GENERATORS, out, "unknown-generator")
    if problem in ("bsde", "control", "dual_curve") or (problem == "fd_oracle"
                                                       and params.get("target", "bsde") != "mixed"):
        _named(cfg, "terminal", TERMINALS, out, "unknown-terminal")
    if problem in ("control", "mixed", "dual_curve") or (problem == "fd_oracle"
                                                         and params.get("target", "bsde") != "bsde"):
        _named(cfg, "coefficients", COEFFICIENTS, out, "unknown-coefficients")
    if problem in ("stopping", "mixed") or (problem == "fd_oracle" and params.get("target") == "mixed"):
        _named(cfg, "obstacle", OBSTACLES, out, "unknown-obstacle")
    if problem == "fd_oracle":
        if params.get("target", "bsde") not in sens.PROBLEMS:
            out.append(Diagnostic("unknown-target", f"params.target must be one of {list(sens.PROBLEMS)}"))
        if params.get("target", "bsde") == "bsde":
            _named(cfg, "generator", GENERATORS, out, "unknown-generator")
    if problem == "stopping" and isinstance(est, list) and "tree_value" in est:
        ob = cfg.get("obstacle")
        name = ob if isinstance(ob, str) else (ob or {}).get("name")
        if name != "markov_put":
            out.append(Diagnostic("tree-needs-markov", "tree_value needs the one-dimensional markov_put obstacle"))
    if problem == "portfolio":
        liab = params.get("liability", "positive_integral")
        if liab not in ("positive_integral", "zero"):
            out.append(Diagnostic("invalid-value", f"params.liability {liab!r} is not known"))
    r = params.get("r")
    if r is not None and (not isinstance(r, (int, float)) or not r > 0):
        out.append(Diagnostic("invalid-value", f"params.r must be positive, got {r!r}"))
    grids = [params["gamma_grid"]] if "gamma_grid" in params else []
    grids += sweep.get("gamma_grid", []) if isinstance(sweep.get("gamma_grid"), list) else []
    for g in grids:
        msg = _gamma_grid_problem(g)
        if msg:
            out.append(Diagnostic("invalid-value", f"gamma_grid {g!r}: {msg}"))
    return out


def _gamma_grid_problem(g) -> str | None:
    """Why ``g`` cannot define a gamma grid, or None when it can."""
    if isinstance(g, dict):
        if set(g) - {"start", "stop", "num"} or not {"start", "stop"} <= set(g):
            return "an object needs 'start' and 'stop' (and optionally 'num')"
        try:
            lo, hi, num = float(g["start"]), float(g["stop"]), g.get("num", 25)
        except (TypeError, ValueError):
            return "start and stop must be numbers"
        if not (0 < lo < hi and math.isfinite(hi)):
            return "needs 0 < start < stop (the grid is geometric)"
        if not _is_int(num) or num < 2:
            return "num must be an integer >= 2"
        return None
    if not isinstance(g, list) or len(g) < 2:
        return "a list needs at least two values"
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in g):
        return "values must be numbers"
    if not all(0 < x < math.inf for x in g) or any(b <= a for a, b in zip(g, g[1:])):
        return "values must be positive and strictly increasing"
    return None


def validate(cfg: dict) -> dict:
    diags = check(cfg)
    if diags:
        raise ConfigError(diags)
    return cfg


# --------------------------------------------------------------------------
# sweep cells


def cells(cfg: dict) -> list[dict]:
    """Sweep coordinates of every cell, in axis-product order."""
    sweep = cfg.get("sweep", {})
    axes = list(sweep)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(sweep[a] for a in axes))] or [{}]


@dataclass
class Row:
    estimator: str
    value: float | None
    std_error: float | None
    method: str
    rel_gap: float | None = None
    error: str = ""
    extra: dict = field(default_factory=dict)


def _spec(cfg, key):
    s = cfg[key]
    return (s, {}) if isinstance(s, str) else (s["name"], s.get("params", {}))


def _cell_config(cfg: dict, coords: dict) -> tuple[dict, dict]:
    """Resolved ``(settings, params)`` of one cell."""
    grid, ens, basis = cfg.get("grid", {}), cfg.get("ensemble", {}), cfg.get("basis", {})
    settings = {
        "seed": cfg["seed"], "T": float(grid.get("T", 1.0)), "n_steps": int(grid.get("n_steps", 50)),
        "n_paths": int(ens.get("n_paths", 2**14)), "dim": int(ens.get("dim", 1)),
        "degree": int(basis.get("degree", 3)), "state": basis.get("state", "x"),
        "knots": basis.get("knots"), "obstacle_feature": bool(basis.get("obstacle_feature", False)),
    }
    params = dict(cfg.get("params", {}))
    for k, v in coords.items():
        if k in GRID_AXES:
            settings[k] = v
        else:
            params[k] = v
    return settings, params


def _rows_from_report(name, rep) -> Row:
    return Row(name, rep.value, rep.std_error, rep.method, extra={"diagnostics": rep.diagnostics})


def run_cell(cfg: dict, coords: dict, workers: int = 1) -> list[Row]:
    """Evaluate every estimator of one cell. Library errors propagate to the caller."""
    s, p = _cell_config(cfg, coords)
    problem = cfg["problem"]
    wanted = list(cfg["estimators"])

    if problem == "portfolio":
        pc = PortfolioConfig(eta=float(p.get("eta", 1.0)), rho=float(p.get("rho", 0.5)), T=s["T"],
                             liability=p.get("liability", "positive_integral"), n_steps=s["n_steps"],
                             n_paths=s["n_paths"], seed=s["seed"], degree=s["degree"], dim=s["dim"],
                             stiff=bool(p.get("stiff", True)), workers=workers)
        res = portfolio_scenario(pc)
        table = {"Y0": (res.y0, res.y0_se), "V0": (res.v0, res.v0_se), "s_inf": (res.s_inf, res.s_inf_se),
                 "s_2": (res.s_2, res.s_2_se)}
        method = {"Y0": "regression", "V0": "regression", "s_inf": "closed_form", "s_2": "closed_form"}
        return [Row(e, *table[e], method[e]) for e in wanted]

    ens = simulate_brownian(make_grid(s["T"], s["n_steps"]), s["dim"], s["n_paths"], s["seed"], workers=workers)
    payoff = None
    ob = None
    if "obstacle" in cfg and problem in ("stopping", "mixed", "fd_oracle"):
        name, op = _spec(cfg, "obstacle")
        ob, payoff = _obstacle(name, op)
    extra = None
    if s["obstacle_feature"] and payoff is not None:
        extra = lambda i, e: payoff(i * e.dt, e.values_tm[i, :, 0])[:, None]  # noqa: E731
    basis = bsde.polynomial_basis(s["degree"], s["state"], extra=extra, knots=s["knots"])
    r = float(p.get("r", sens.DEFAULT_FD_RADIUS))
    richardson = bool(p.get("richardson", True))
    xi = _terminal(*_spec(cfg, "terminal")) if "terminal" in cfg else None
    coeffs = _coefficients(*_spec(cfg, "coefficients"), s["dim"]) if "coefficients" in cfg else None
    out: list[Row] = []

    if problem == "bsde":
        f = _generator(*_spec(cfg, "generator"))
        sol = bsde.solve_bsde(f, xi, ens, basis, workers=workers)
        for e in wanted:
            if e == "Y0":
                out.append(Row(e, sol.y0, sol.y0_se, "regression"))
            elif e == "linf_bsde":
                out.append(_rows_from_report(e, sens.sensitivity_linf_bsde(f, xi, ens, basis, solution=sol)))
            elif e == "linf_bsde_inf":
                out.append(_rows_from_report(e, sens.sensitivity_linf_bsde(f, xi, ens, basis, direction="inf")))
            elif e == "fd_linf":
                out.append(_rows_from_report(e, sens.fd_sensitivity("bsde", f, xi, ens, basis, r, richardson)))
        return out

    if problem in ("control", "mixed"):
        f = generators.hamiltonian(coeffs)
        target = xi if problem == "control" else ob
        sol = (bsde.solve_bsde(f, xi, ens, basis, workers=workers) if problem == "control"
               else solve_rbsde(f, ob, ens, basis, workers=workers))
        for e in wanted:
            if e == "Y0":
                out.append(Row(e, sol.y0, sol.y0_se, "regression"))
            elif e in ("linf_control", "l2_control", "mixed_linf", "mixed_l2"):
                fn = getattr(sens, f"sensitivity_{e}")
                out.append(_rows_from_report(e, fn(coeffs, target, ens, basis, solution=sol)))
            elif e == "fd_linf":
                out.append(_rows_from_report(e, sens.fd_sensitivity(problem, coeffs, target, ens, basis, r,
                                                                    richardson)))
            elif e == "dual_l2":
                curve = sens.dual_curve(problem, coeffs, target, ens, basis, _gamma_grid(p))
                out.append(_rows_from_report(e, sens.dual_sensitivity(curve)))
        return out

    if problem == "stopping":
        f = generators.hamiltonian(generators.trivial_coefficients(s["dim"]))
        sol = solve_rbsde(f, ob, ens, basis, workers=workers)
        for e in wanted:
            if e == "Y0":
                out.append(Row(e, sol.y0, sol.y0_se, "regression"))
            elif e in ("stopping_linf", "stopping_l2"):
                rep = sens.sensitivity_stopping(ob, ens, basis, e.split("_")[1], solution=sol)
                out.append(_rows_from_report(e, rep))
            elif e == "tree_value":
                tree = binomial_stopping(payoff, s["T"], int(p.get("tree_steps", MIN_TREE_STEPS)))
                gap = abs(sol.y0 - tree.value) / abs(tree.value) if tree.value != 0 else None
                out.append(Row(e, tree.value, 0.0, "tree", rel_gap=gap))
        return out

    if problem == "dual_curve":
        curve = sens.dual_curve("control", coeffs, xi, ens, basis, _gamma_grid(p),
                                radii=[float(p.get("r", 0.0))], divisor=float(p.get("divisor", 4.0)))
        l2 = None
        for e in wanted:
            if e == "G0":
                out.append(Row(e, curve.G0, curve.G0_se, "regression"))
            elif e == "secant":
                out.append(Row(e, curve.secant, curve.secant_se, "dual_curve"))
            elif e == "implied_l2":
                out.append(_rows_from_report(e, sens.dual_sensitivity(curve)))
            elif e == "dual_value":
                out.append(Row(e, float(curve.dual_values[0]), None, "dual_curve",
                               extra={"gamma_star": float(curve.gamma_star[0])}))
            elif e == "l2_control":
                l2 = sens.sensitivity_l2_control(coeffs, xi, ens, basis)
                out.append(_rows_from_report(e, l2))
        if l2 is not None:
            gap = abs(curve.implied_sensitivity - l2.value) / abs(l2.value) if l2.value else None
            for row in out:
                if row.estimator in ("implied_l2", "l2_control"):
                    row.rel_gap = gap
        return out

    # fd_oracle: closed form versus Richardson finite difference on the same paths
    target = p.get("target", "bsde")
    if target == "bsde":
        model = _generator(*_spec(cfg, "generator"))
        data = xi
        cf = lambda: sens.sensitivity_linf_bsde(model, xi, ens, basis)  # noqa: E731
    elif target == "control":
        model, data = coeffs, xi
        cf = lambda: sens.sensitivity_linf_control(coeffs, xi, ens, basis)  # noqa: E731
    else:
        model, data = coeffs, ob
        cf = lambda: sens.sensitivity_mixed_linf(coeffs, ob, ens, basis)  # noqa: E731
    reports = {}
    for e in wanted:
        if e == "closed_form":
            reports[e] = cf()
        else:
            reports[e] = sens.fd_sensitivity(target, model, data, ens, basis, r, richardson)
    gap = None
    if len(reports) == 2 and reports["closed_form"].value != 0:
        gap = abs(reports["closed_form"].value - reports["finite_difference"].value) / abs(reports["closed_form"].value)
    for e in wanted:
        row = _rows_from_report(e, reports[e])
        row.rel_gap = gap
        out.append(row)
    return out


def _gamma_grid(p: dict) -> np.ndarray | None:
    g = p.get("gamma_grid")
    if g is None:
        if "gamma_max" in p:
            return np.logspace(-3, np.log10(float(p["gamma_max"])), int(p.get("gamma_points", 25)))
        return None
    if isinstance(g, dict):
        return np.logspace(np.log10(float(g["start"])), np.log10(float(g["stop"])), int(g.get("num", 25)))
    return np.asarray(g, dtype=np.float64)


def execute_cell(cfg: dict, index: int, coords: dict, workers: int = 1) -> tuple[int, list[Row], float, str]:
    """Run one cell, turning library errors into error rows.

    Returns ``(index, rows, runtime_ms, error_name)``: the exception class
    name (``NumericFailure``, ``AssumptionViolation``, ...) or ``""``.
    """
    t0 = time.perf_counter()
    try:
        rows = run_cell(cfg, coords, workers)
        name = ""
    except (DrbsdeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        name = type(exc).__name__
        rows = [Row(e, None, None, "", error=f"{name}: {exc}") for e in cfg["estimators"]]
    return index, rows, (time.perf_counter() - t0) * 1e3, name
