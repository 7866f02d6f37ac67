"""End-to-end configurations: the stochastic-volatility portfolio and stopping benchmarks.

Portfolio
    Exponential utility with risk aversion ``eta`` under a Sharpe ratio
    ``theta_t = tanh(W^1_t)`` and correlation ``rho``. With
    ``beta = eta (1 - rho^2)`` the value reduces to the linear equation with
    driver ``-(beta / 2 eta) theta^2 y`` and terminal ``exp(beta xi)``, and
    ``V_0 = -Y_0^(eta / beta)``. The optimal drift is zero, so the
    sensitivities are plain discounted norms of ``Z``.

Stopping
    ``flat`` and ``never_binding`` exercise the reductions of the mixed
    estimators; ``markov_put`` is a bounded discounted put-type obstacle
    with a binomial-lattice oracle.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bsde import ObstacleSpec, TerminalSpec, obstacle_from_table, polynomial_basis, solve_bsde
from .errors import InvalidArgument, NumericFailure
from .generators import (ControlledCoefficients, _const_scalar, _const_vector, constant_coefficients,
                         finite_actions, hamiltonian, trivial_coefficients)
from .oracles import MIN_TREE_STEPS, binomial_stopping
from .paths import make_grid, simulate_brownian
from .rbsde import solve_rbsde, stopping_boundary
from .sensitivity import (sensitivity_l2_control, sensitivity_linf_control, sensitivity_mixed_l2,
                          sensitivity_mixed_linf, sensitivity_stopping)

BETA_FLOOR = 1e-6
LIABILITIES = ("positive_integral", "zero")
PROBE_TIMES = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class PortfolioConfig:
    eta: float = 1.0
    rho: float = 0.5
    T: float = 1.0
    liability: str = "positive_integral"
    n_steps: int = 50
    n_paths: int = 2**15
    seed: int = 2024
    degree: int = 3
    dim: int = 1
    stiff: bool = True
    workers: int = 1

    def validate(self) -> None:
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise InvalidArgument(f"eta must be positive, got {self.eta}")
        if not -1 < self.rho < 1:
            raise InvalidArgument(f"rho must lie in (-1, 1), got {self.rho}")
        if self.liability not in LIABILITIES:
            raise InvalidArgument(f"liability must be one of {LIABILITIES}, got {self.liability!r}")
        if self.dim < 1:
            raise InvalidArgument("dim must be >= 1")
        make_grid(self.T, self.n_steps)

    @property
    def beta(self) -> float:
        return max(self.eta * (1.0 - self.rho**2), BETA_FLOOR)

    @property
    def beta_floored(self) -> bool:
        return self.eta * (1.0 - self.rho**2) < BETA_FLOOR


@dataclass(frozen=True)
class ScenarioResult:
    y0: float
    y0_se: float
    v0: float
    v0_se: float
    s_inf: float
    s_inf_se: float
    s_2: float
    s_2_se: float
    config: dict
    runtime_s: float
    diagnostics: dict = field(default_factory=dict)


def portfolio_coefficients(cfg: PortfolioConfig) -> ControlledCoefficients:
    """Singleton control with discount rate ``(beta / 2 eta) tanh(W^1_t)^2`` and no drift."""
    rate = cfg.beta / (2.0 * cfg.eta)

    def k(i, ens, a):
        return rate * np.tanh(ens.values_tm[i, :, 0]) ** 2

    return ControlledCoefficients(
        actions=finite_actions(np.zeros((1, 1))),
        k=k, l=_const_scalar(0.0), lam=_const_vector(np.zeros(cfg.dim)),
        alpha_star=lambda i, ens, y, z: np.zeros((y.shape[0], 1)),
        d_alpha_y=lambda i, ens, y, z: np.zeros((y.shape[0], 1)),
        d_alpha_z=lambda i, ens, y, z: np.zeros((y.shape[0], 1, z.shape[1])),
        k_bound=rate, lambda_bound=0.0, name=f"portfolio(eta={cfg.eta}, rho={cfg.rho})",
    )


def portfolio_terminal(cfg: PortfolioConfig) -> TerminalSpec:
    beta = cfg.beta
    if cfg.liability == "zero":
        return TerminalSpec(lambda ens: np.ones(ens.n_paths), "bounded", 1.0, name="exp(0)")
    return TerminalSpec(lambda ens: np.exp(beta * np.maximum(ens.running_integral[:, -1, 0], 0.0)),
                        "square_integrable", name="exp(beta (int W)^+)")


def portfolio_scenario(cfg: PortfolioConfig) -> ScenarioResult:
    """Solve the reduced portfolio equation and its two sensitivities on one ensemble."""
    cfg.validate()
    t0 = time.perf_counter()
    ens = simulate_brownian(make_grid(cfg.T, cfg.n_steps), cfg.dim, cfg.n_paths, cfg.seed,
                            workers=cfg.workers)
    basis = polynomial_basis(cfg.degree, state="x_int")
    coeffs = portfolio_coefficients(cfg)
    xi = portfolio_terminal(cfg)
    sol = solve_bsde(hamiltonian(coeffs), xi, ens, basis, stiff=cfg.stiff, workers=cfg.workers)
    if not sol.y0 > 0:
        raise NumericFailure(f"portfolio value Y0={sol.y0} is not positive")
    s_inf = sensitivity_linf_control(coeffs, xi, ens, basis, solution=sol)
    s_2 = sensitivity_l2_control(coeffs, xi, ens, basis, solution=sol)
    p = cfg.eta / cfg.beta
    log_y0 = np.log(sol.y0)
    v0 = -float(np.exp(p * log_y0))
    v0_se = float(p * np.exp((p - 1.0) * log_y0) * sol.y0_se)
    diag = {
        "beta": cfg.beta, "beta_floored": cfg.beta_floored,
        "basis": basis.name,
        "discount_mass": s_inf.diagnostics["discount_mass"],
        "measure_crosscheck_z": s_inf.diagnostics["measure_crosscheck_z"],
    }
    return ScenarioResult(sol.y0, sol.y0_se, v0, v0_se, s_inf.value, s_inf.std_error, s_2.value,
                          s_2.std_error, asdict(cfg), time.perf_counter() - t0, diag)


# --------------------------------------------------------------------------
# stopping benchmarks


STOPPING_KINDS = ("flat", "never_binding", "markov_put")


@dataclass(frozen=True)
class StoppingParams:
    T: float = 1.0
    n_steps: int = 50
    n_paths: int = 2**16
    seed: int = 11
    degree: int = 3
    # flat
    level: float = 1.0
    # never_binding: the drift of the controlled problem and the obstacle margin
    lam: float = 0.3
    margin: float = 1.0
    # markov_put: g(t, x) = -exp(-rate t) min((strike - x)^+, cap)
    strike: float = 0.0
    rate: float = 2.0
    cap: float = 4.0
    knots: tuple = tuple(float(k) for k in np.round(np.arange(-1.5, 0.51, 0.25), 10))
    tree_steps: int = MIN_TREE_STEPS
    tree_oracle: bool | None = None  # None: only for markov_put
    workers: int = 1


@dataclass(frozen=True)
class StoppingBenchmark:
    kind: str
    y0: float
    y0_se: float
    oracle_value: float | None
    rel_error: float | None
    s_linf: float
    s_linf_se: float
    s_l2: float
    s_l2_se: float
    boundary: dict = field(default_factory=dict)  # probe time -> (empirical, oracle)
    diagnostics: dict = field(default_factory=dict)
    runtime_s: float = 0.0


def markov_put_payoff(strike: float, rate: float, cap: float):
    def g(t, x):
        return -np.exp(-rate * t) * np.minimum(np.maximum(strike - np.asarray(x), 0.0), cap)
    return g


def stopping_benchmark(kind: str, params: StoppingParams | dict | None = None) -> StoppingBenchmark:
    """Run a stopping instance with the reflected solver and the stopped estimators."""
    if kind not in STOPPING_KINDS:
        raise InvalidArgument(f"kind must be one of {STOPPING_KINDS}, got {kind!r}")
    try:
        p = params if isinstance(params, StoppingParams) else StoppingParams(**(params or {}))
    except TypeError as exc:
        raise InvalidArgument(f"bad stopping parameters: {exc}") from exc
    if kind != "markov_put" and p.tree_oracle:
        raise InvalidArgument(f"the tree oracle needs a one-dimensional Markov obstacle; {kind!r} is not one")
    t0 = time.perf_counter()
    ens = simulate_brownian(make_grid(p.T, p.n_steps), 1, p.n_paths, p.seed, workers=p.workers)
    if kind == "flat":
        return _flat(p, ens, t0)
    if kind == "never_binding":
        return _never_binding(p, ens, t0)
    return _markov_put(p, ens, t0)


def _flat(p, ens, t0):
    c = float(p.level)
    ob = ObstacleSpec(lambda i, e: np.full(e.n_paths, c), integrability="bounded", bound=abs(c),
                      name="flat")
    basis = polynomial_basis(p.degree)
    sol = solve_rbsde(hamiltonian(trivial_coefficients()), ob, ens, basis, workers=p.workers)
    lin = sensitivity_stopping(ob, ens, basis, "linf", solution=sol)
    l2 = sensitivity_stopping(ob, ens, basis, "l2", solution=sol)
    diag = {"hit_max": int(sol.hit.max()), "K_total": float(sol.K[:, -1].max())}
    return StoppingBenchmark("flat", sol.y0, sol.y0_se, c, abs(sol.y0 - c) / max(abs(c), 1e-300),
                             lin.value, lin.std_error, l2.value, l2.std_error, {}, diag,
                             time.perf_counter() - t0)


def _never_binding(p, ens, t0):
    coeffs = constant_coefficients(lam=p.lam)
    f = hamiltonian(coeffs)
    basis = polynomial_basis(p.degree)
    xi = TerminalSpec(lambda e: e.values[:, -1, 0], "square_integrable", name="X_T")
    free = solve_bsde(f, xi, ens, basis, workers=p.workers)
    table = free.Y + p.margin
    table[:, -1] = free.Y[:, -1]
    ob = obstacle_from_table(table, integrability="square_integrable", name="unreflected+margin")
    sol = solve_rbsde(f, ob, ens, basis, workers=p.workers)
    mixed_l = sensitivity_mixed_linf(coeffs, ob, ens, basis, solution=sol)
    mixed_2 = sensitivity_mixed_l2(coeffs, ob, ens, basis, solution=sol)
    ctrl_l = sensitivity_linf_control(coeffs, xi, ens, basis, solution=free)
    ctrl_2 = sensitivity_l2_control(coeffs, xi, ens, basis, solution=free)
    diag = {
        "bitwise_Y": bool(np.array_equal(sol.Y, free.Y)),
        "bitwise_linf": mixed_l.value == ctrl_l.value and mixed_l.std_error == ctrl_l.std_error,
        "bitwise_l2": mixed_2.value == ctrl_2.value and mixed_2.std_error == ctrl_2.std_error,
        "control_linf": ctrl_l.value, "control_l2": ctrl_2.value,
        "hit_min": int(sol.hit.min()),
    }
    return StoppingBenchmark("never_binding", sol.y0, sol.y0_se, free.y0, abs(sol.y0 - free.y0),
                             mixed_l.value, mixed_l.std_error, mixed_2.value, mixed_2.std_error, {},
                             diag, time.perf_counter() - t0)


def markov_put_problem(p: StoppingParams):
    """Obstacle, basis and payoff of the ``markov_put`` instance."""
    g = markov_put_payoff(p.strike, p.rate, p.cap)
    ob = ObstacleSpec(lambda i, e: g(i * e.dt, e.values[:, i, 0]), integrability="bounded",
                      bound=p.cap, name="discounted_put")
    obstacle_col = lambda i, e: g(i * e.dt, e.values_tm[i, :, 0])[:, None]  # noqa: E731
    basis = polynomial_basis(p.degree, extra=obstacle_col, knots=list(p.knots) or None)
    return g, ob, basis


def _markov_put(p, ens, t0):
    g, ob, basis = markov_put_problem(p)
    sol = solve_rbsde(hamiltonian(trivial_coefficients()), ob, ens, basis, workers=p.workers)
    lin = sensitivity_stopping(ob, ens, basis, "linf", solution=sol)
    l2 = sensitivity_stopping(ob, ens, basis, "l2", solution=sol)
    oracle = rel = None
    boundary = {}
    diag = {"stopped_fraction": lin.diagnostics["stopped_fraction"], "cell": float(np.sqrt(ens.dt)),
            "basis": basis.name}
    if p.tree_oracle is not False:
        tree = binomial_stopping(g, p.T, p.tree_steps)
        berm = binomial_stopping(g, p.T, p.tree_steps, exercise_dates=p.n_steps) \
            if p.tree_steps % p.n_steps == 0 else None
        oracle = tree.value
        rel = abs(sol.y0 - oracle) / abs(oracle)
        for t in PROBE_TIMES:
            i = ens.grid.index_of(t * p.T)
            emp = stopping_boundary(ens.values[:, i, 0], sol.contact(i), "below")
            boundary[t] = (emp, tree.boundary_at(t * p.T))
        if berm is not None:
            diag["bermudan_value"] = berm.value
            diag["bermudan_boundary"] = {t: berm.boundary_at(t * p.T) for t in PROBE_TIMES}
    return StoppingBenchmark("markov_put", sol.y0, sol.y0_se, oracle, rel, lin.value, lin.std_error,
                             l2.value, l2.std_error, boundary, diag, time.perf_counter() - t0)
