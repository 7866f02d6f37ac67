import numpy as np
import pytest

from drbsde.bsde import (ObstacleSpec, TerminalSpec, linear_bsde_pathwise, obstacle_from_table,
                         polynomial_basis, solve_bsde, solve_bsde_random_terminal,
                         solve_linear_bsde_weights)
from drbsde.errors import InvalidArgument, NumericFailure, RegressionFailure
from drbsde.generators import linear_generator, zero_generator
from drbsde.paths import make_grid, simulate_brownian

X_T = TerminalSpec(lambda e: e.values[:, -1, 0], name="X_T")


def test_constant_terminal_reproduced_exactly(small_ens):
    sol = solve_bsde(zero_generator(), TerminalSpec(lambda e: np.full(e.n_paths, 2.5)), small_ens)
    assert np.all(sol.Y == 2.5)
    assert np.all(sol.Z == 0.0)
    assert sol.y0 == 2.5 and sol.y0_se == 0.0


def test_exponential_decay_ode():
    ens = simulate_brownian(make_grid(1.0, 100), 1, 1024, seed=0)
    sol = solve_bsde(linear_generator(a=0.5), TerminalSpec(lambda e: np.ones(e.n_paths)), ens)
    assert abs(sol.y0 - np.exp(-0.5)) < 1e-3
    # explicit scheme: (1 - dt/2)^n exactly
    assert sol.y0 == pytest.approx((1 - 0.005) ** 100, rel=1e-12)


def test_martingale_representation(small_ens):
    sol = solve_bsde(zero_generator(), X_T, small_ens)
    # Y_0 is the sample mean of X_T up to regression error
    assert sol.y0 == pytest.approx(small_ens.values[:, -1, 0].mean(), abs=1e-9)
    assert abs(sol.y0) < 4 * sol.y0_se
    z = sol.Z[:, :-1, 0]
    # per-step sample mean of (dX)^2 / dt has relative SE sqrt(2 / N) ~ 0.022
    assert abs(z.mean() - 1.0) < 0.03
    assert np.abs(z - 1.0).mean() < 0.05
    assert np.all(sol.Z[:, -1] == 0)
    assert sol.pathwise.mean() == pytest.approx(sol.y0, abs=1e-12)


def test_linear_drift_shift(small_ens):
    # f = -b z moves the mean of X_T to -b T
    sol = solve_bsde(linear_generator(b=0.3), X_T, small_ens)
    assert sol.y0 == pytest.approx(small_ens.values[:, -1, 0].mean() - 0.3 * sol.Z[:, :-1, 0].mean(),
                                   abs=1e-9)
    assert abs(sol.y0 + 0.3) < 4 * sol.y0_se


def test_paths_and_terminal_node(small_ens):
    xi = TerminalSpec(lambda e: np.maximum(e.values[:, -1, 0], 0.0))
    sol = solve_bsde(linear_generator(a=0.1, c=0.2), xi, small_ens)
    assert np.array_equal(sol.Y[:, -1], xi(small_ens))
    assert sol.Y.shape == (4096, 21) and sol.Z.shape == (4096, 21, 1)
    assert abs(sol.pathwise.mean() - sol.y0) < 5 * sol.y0_se


def test_workers_do_not_change_bits():
    ens = simulate_brownian(make_grid(1.0, 8), 1, 9000, seed=3)
    xi = TerminalSpec(lambda e: np.sin(e.values[:, -1, 0]))
    a = solve_bsde(linear_generator(0.2, 0.1), xi, ens, workers=1)
    b = solve_bsde(linear_generator(0.2, 0.1), xi, ens, workers=3)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.Z, b.Z)


def test_nonfinite_terminal_names_path(small_ens):
    def bad(e):
        v = np.zeros(e.n_paths)
        v[11] = np.inf
        return v
    with pytest.raises(NumericFailure) as exc:
        solve_bsde(zero_generator(), TerminalSpec(bad), small_ens)
    assert exc.value.path_index == 11


def test_singular_regression_raises(small_ens):
    dup = lambda i, e: np.column_stack([e.values[:, i, 0], e.values[:, i, 0]])  # noqa: E731
    basis = polynomial_basis(1, ridge=0.0, extra=dup)
    with pytest.raises(RegressionFailure) as exc:
        solve_bsde(zero_generator(), X_T, small_ens, basis)
    assert exc.value.time_index is not None


def test_basis_options(small_ens):
    with pytest.raises(InvalidArgument):
        polynomial_basis(3, state="nope")
    with pytest.raises(InvalidArgument):
        polynomial_basis(-1)
    b = polynomial_basis(2, knots=[-0.5, 0.0, 0.5])
    assert b.name == "poly2[x]+hinge3"
    assert b.features(5, small_ens).shape == (4096, 3 + 3)
    b2 = polynomial_basis(2, state="x_int")
    assert b2.features(5, small_ens).shape == (4096, 6)


def test_random_terminal_limits(small_ens):
    ob = ObstacleSpec(lambda i, e: e.values[:, i, 0] ** 2 + 1.0)
    n = small_ens.n_steps
    full = solve_bsde_random_terminal(zero_generator(), ob, np.full(4096, n), small_ens)
    ref = solve_bsde(zero_generator(), TerminalSpec(lambda e: e.values[:, -1, 0] ** 2 + 1.0), small_ens)
    assert np.array_equal(full.Y, ref.Y)
    now = solve_bsde_random_terminal(zero_generator(), ob, np.zeros(4096, dtype=int), small_ens)
    assert now.y0 == 1.0
    with pytest.raises(InvalidArgument):
        solve_bsde_random_terminal(zero_generator(), ob, np.full(4096, n + 1), small_ens)


def test_random_terminal_martingale(small_ens):
    # frozen at tau, Y_0 is E[X_tau^2 + 1] = E[tau] dt + 1 for stopping times tau
    ob = ObstacleSpec(lambda i, e: e.values[:, i, 0] ** 2 + 1.0)
    tau = np.where(np.abs(small_ens.values[:, 10, 0]) > 0.5, 10, 20)
    sol = solve_bsde_random_terminal(zero_generator(), ob, tau, small_ens)
    exact = 1.0 + (tau * small_ens.dt).mean()
    assert abs(sol.y0 - exact) < 5 * sol.y0_se + 1e-2


def test_linear_weights_closed_form(small_ens):
    v, se = solve_linear_bsde_weights(-0.5, 0.0, 1.0, small_ens)
    # int_0^1 e^{-0.5 t} dt on a left-point grid
    t = np.arange(20) * small_ens.dt
    assert v == pytest.approx((np.exp(-0.5 * t) * small_ens.dt).sum(), rel=1e-12)
    assert se == pytest.approx(0.0, abs=1e-14)
    stop = np.full(4096, 10)
    assert linear_bsde_pathwise(0.0, 0.0, 1.0, small_ens, stop)[0] == pytest.approx(0.5)
    with pytest.raises(InvalidArgument):
        linear_bsde_pathwise(0.0, 0.0, np.ones(3), small_ens)
    with pytest.raises(NumericFailure):
        linear_bsde_pathwise(np.nan, 0.0, 1.0, small_ens)


def test_linear_weights_match_solver(small_ens):
    # U solving dU = V dX - (a U - b V + c) dt, with c = |X_t|: compare the two routes
    a, b = -0.3, 0.4
    c = np.abs(small_ens.values[:, :-1, 0])
    v, se = solve_linear_bsde_weights(a, b, c, small_ens)
    from drbsde.generators import GeneratorSpec
    cc = np.abs(small_ens.values[:, :, 0])
    f = GeneratorSpec(lambda i, e, y, z: a * y - b * z[:, 0] + cc[:, i],
                      lambda i, e, y, z: np.full_like(y, a), lambda i, e, y, z: np.full_like(z, -b))
    sol = solve_bsde(f, TerminalSpec(lambda e: np.zeros(e.n_paths)), small_ens)
    assert abs(sol.y0 - v) < 4 * np.hypot(se, sol.y0_se) + 5e-3


def test_obstacle_table_helpers(small_ens):
    tab = np.ones((4096, 21))
    ob = obstacle_from_table(tab)
    assert ob.table(small_ens).shape == (4096, 21)
    with pytest.raises(InvalidArgument):
        obstacle_from_table(np.ones(5))
