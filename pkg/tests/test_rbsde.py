import numpy as np
import pytest

from drbsde.bsde import ObstacleSpec, TerminalSpec, polynomial_basis, solve_bsde
from drbsde.generators import constant_coefficients, hamiltonian, linear_generator, zero_generator
from drbsde.paths import make_grid, simulate_brownian
from drbsde.rbsde import hit_tolerance, hitting_time, solve_rbsde, stopping_boundary
from drbsde.scenarios import markov_put_payoff

PUT = markov_put_payoff(0.0, 2.0, 4.0)

OBSTACLES = {
    "flat": ObstacleSpec(lambda i, e: np.full(e.n_paths, 1.0), integrability="bounded", bound=1.0),
    "markov_put": ObstacleSpec(lambda i, e: PUT(i * e.dt, e.values[:, i, 0]), integrability="bounded",
                               bound=4.0),
    "abs_plus_one": ObstacleSpec(lambda i, e: np.abs(e.values[:, i, 0]) + 1.0,
                                 terminal=lambda e: np.abs(e.values[:, -1, 0])),
}
DRIVERS = {"zero": zero_generator(), "linear": linear_generator(0.2, 0.3, -0.1),
           "drift": hamiltonian(constant_coefficients(lam=0.5))}


@pytest.fixture(scope="module")
def solutions(small_ens):
    return {(o, d): solve_rbsde(DRIVERS[d], OBSTACLES[o], small_ens)
            for o in OBSTACLES for d in DRIVERS}


@pytest.mark.parametrize("o", list(OBSTACLES))
@pytest.mark.parametrize("d", list(DRIVERS))
def test_invariants(solutions, o, d):
    sol = solutions[(o, d)]
    tab = sol.obstacle
    # obstacle dominance and terminal exactness
    assert np.all(sol.Y <= tab)
    assert np.array_equal(sol.Y[:, -1], tab[:, -1])
    # K starts at 0 and is nondecreasing
    assert np.all(sol.K[:, 0] == 0)
    assert np.all(sol.dK >= 0)
    np.testing.assert_allclose(np.diff(sol.K, axis=1), sol.dK, atol=1e-12)
    # Skorokhod complementarity: K only increases on the contact set
    assert np.sum((tab[:, :-1] - sol.Y[:, :-1]) * sol.dK) == 0.0
    # first hit is the first contact
    rows = np.arange(sol.ens.n_paths)
    gap = tab - sol.Y
    assert np.all(gap[rows, sol.hit] <= sol.hit_tol[sol.hit])
    before = np.arange(sol.ens.n_steps + 1)[None, :] < sol.hit[:, None]
    assert np.all(~before | (gap > sol.hit_tol[None, :]))


def test_flat_obstacle_stops_immediately(solutions):
    sol = solutions[("flat", "zero")]
    assert np.all(sol.hit == 0)
    assert sol.y0 == 1.0


def test_never_binding_equals_free(small_ens):
    xi = TerminalSpec(lambda e: e.values[:, -1, 0])
    free = solve_bsde(zero_generator(), xi, small_ens)
    tab = free.Y + 1.0
    tab[:, -1] = free.Y[:, -1]
    sol = solve_rbsde(zero_generator(), ObstacleSpec(lambda i, e: tab[:, i]), small_ens)
    assert np.array_equal(sol.Y, free.Y)
    assert np.all(sol.K == 0)
    assert np.all(sol.hit == small_ens.n_steps)


def test_reflection_lowers_value(small_ens):
    ob = OBSTACLES["abs_plus_one"]
    free = solve_bsde(zero_generator(), ob.as_terminal(), small_ens)
    ref = solve_rbsde(zero_generator(), ob, small_ens)
    assert ref.y0 <= free.y0 + 1e-12


def test_hitting_summary(solutions):
    sol = solutions[("markov_put", "zero")]
    hs = hitting_time(sol)
    assert hs.counts.sum() == sol.ens.n_paths
    assert 0 < hs.stopped_before_T < 1
    assert hs.distribution.sum() == pytest.approx(1.0)


def test_hit_tolerance_scale():
    gap = np.array([[0.0, 1.0], [0.0, -1.0]])
    np.testing.assert_allclose(hit_tolerance(gap), [1e-8, 1e-8 + 1e-3])


def test_stopping_boundary_classifier():
    x = np.linspace(-2, 2, 401)
    c = x <= -0.5
    assert stopping_boundary(x, c) == pytest.approx(-0.495, abs=0.01)
    c2 = c.copy()
    c2[-1] = True  # an isolated contact in the far tail is ignored
    assert stopping_boundary(x, c2) == pytest.approx(-0.495, abs=0.01)
    assert stopping_boundary(x, np.zeros_like(c)) is None
    assert stopping_boundary(x, x >= 1.0, side="above") == pytest.approx(0.995, abs=0.01)


def test_reflected_reproducible_across_workers():
    ens = simulate_brownian(make_grid(1.0, 10), 1, 9000, seed=8)
    basis = polynomial_basis(3)
    a = solve_rbsde(zero_generator(), OBSTACLES["markov_put"], ens, basis, workers=1)
    b = solve_rbsde(zero_generator(), OBSTACLES["markov_put"], ens, basis, workers=2)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.hit, b.hit)
