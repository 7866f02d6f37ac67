import numpy as np
import pytest
from scipy.stats import norm

from drbsde.errors import InvalidArgument
from drbsde.oracles import MIN_TREE_STEPS, binomial_stopping
from drbsde.scenarios import markov_put_payoff


def test_european_limit_matches_gaussian_expectation():
    # exercise only at T: the tree reproduces E[-(K - X_T)^+] = -(K Phi(K) + phi(K))
    g = lambda t, x: np.where(t < 1.0 - 1e-12, 10.0, -np.maximum(0.3 - x, 0.0))  # noqa: E731
    tree = binomial_stopping(g, 1.0, 2000)
    exact = -(0.3 * norm.cdf(0.3) + norm.pdf(0.3))
    assert tree.value == pytest.approx(exact, abs=2e-3)


def test_immediate_exercise_when_obstacle_increases():
    tree = binomial_stopping(lambda t, x: t + 0.0 * x, 1.0, 2000)
    assert tree.value == 0.0


def test_markov_put_converges():
    g = markov_put_payoff(0.0, 2.0, 4.0)
    a = binomial_stopping(g, 1.0, 2000)
    b = binomial_stopping(g, 1.0, 4000)
    assert abs(a.value - b.value) < 1e-4
    assert -0.19 < a.value < -0.17
    for t in (0.25, 0.5, 0.75):
        bnd = a.boundary_at(t)
        assert -0.6 < bnd < -0.3
    assert a.times[-1] == 1.0


def test_bermudan_dominates_american():
    g = markov_put_payoff(0.0, 2.0, 4.0)
    am = binomial_stopping(g, 1.0, 2000)
    be = binomial_stopping(g, 1.0, 2000, exercise_dates=50)
    assert be.value >= am.value
    assert np.isfinite(be.boundary_at(0.5))


def test_side_above_mirrors():
    g = markov_put_payoff(0.0, 2.0, 4.0)
    below = binomial_stopping(g, 1.0, 2000)
    above = binomial_stopping(lambda t, x: g(t, -x), 1.0, 2000, side="above")
    assert above.value == pytest.approx(below.value, rel=1e-12)
    assert above.boundary_at(0.5) == pytest.approx(-below.boundary_at(0.5))


@pytest.mark.parametrize("kw", [dict(n_steps=MIN_TREE_STEPS - 1), dict(side="left"), dict(T=0.0),
                                dict(exercise_dates=7)])
def test_rejects(kw):
    args = dict(g=markov_put_payoff(0.0, 2.0, 4.0), T=1.0, n_steps=2000) | kw
    with pytest.raises(InvalidArgument):
        binomial_stopping(**args)


def test_nonfinite_obstacle():
    with pytest.raises(InvalidArgument):
        binomial_stopping(lambda t, x: np.where(x > 0, np.inf, 0.0), 1.0, 2000)
