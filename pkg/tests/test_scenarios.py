import numpy as np
import pytest

from drbsde.errors import InvalidArgument
from drbsde.scenarios import (BETA_FLOOR, PortfolioConfig, StoppingParams, markov_put_payoff,
                              portfolio_scenario, stopping_benchmark)

FAST = dict(n_paths=2**12, n_steps=20)


def test_beta_and_floor():
    assert PortfolioConfig(eta=2.0, rho=0.5).beta == pytest.approx(1.5)
    c = PortfolioConfig(eta=1.0, rho=1 - 1e-12)
    assert c.beta == BETA_FLOOR and c.beta_floored


@pytest.mark.parametrize("kw", [dict(eta=0.0), dict(eta=np.nan), dict(rho=1.0), dict(liability="bond"),
                                dict(n_steps=0), dict(dim=0)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        portfolio_scenario(PortfolioConfig(**(FAST | kw)))


def test_portfolio_outputs_consistent():
    r = portfolio_scenario(PortfolioConfig(eta=1.0, **FAST))
    assert r.y0 > 1.0
    assert r.v0 == pytest.approx(-np.exp((1.0 / 0.75) * np.log(r.y0)))
    assert 0 < r.s_inf <= r.s_2 + 3 * (r.s_inf_se + r.s_2_se)
    assert r.config["eta"] == 1.0
    assert r.diagnostics["measure_crosscheck_z"] < 4


def test_portfolio_increasing_in_eta():
    vals = [portfolio_scenario(PortfolioConfig(eta=e, **FAST)) for e in (0.5, 2.0, 4.0)]
    for a, b in zip(vals, vals[1:]):
        assert b.s_inf > a.s_inf and b.s_2 > a.s_2


def test_degenerate_limits():
    # constant liability: Y is deterministic up to regression noise in the discount
    z = portfolio_scenario(PortfolioConfig(liability="zero", **FAST))
    assert z.s_inf < 0.1 and z.y0 < 1.0
    flat = portfolio_scenario(PortfolioConfig(rho=0.999999, **FAST))
    assert flat.s_inf < 1e-4


def test_stopping_kinds_and_errors():
    with pytest.raises(InvalidArgument):
        stopping_benchmark("bermudan")
    with pytest.raises(InvalidArgument):
        stopping_benchmark("flat", {"colour": 1})
    with pytest.raises(InvalidArgument):
        stopping_benchmark("flat", {"tree_oracle": True, **FAST})


def test_flat_and_never_binding():
    f = stopping_benchmark("flat", StoppingParams(level=2.0, **FAST))
    assert f.y0 == 2.0 and f.s_linf == 0.0 and f.s_l2 == 0.0
    nb = stopping_benchmark("never_binding", FAST)
    assert nb.diagnostics["bitwise_Y"] and nb.diagnostics["bitwise_linf"] and nb.diagnostics["bitwise_l2"]
    assert nb.rel_error == 0.0


def test_markov_put_small():
    b = stopping_benchmark("markov_put", dict(n_paths=2**13, n_steps=20))
    assert b.oracle_value == pytest.approx(-0.1811, abs=2e-4)
    assert b.rel_error < 0.05
    assert set(b.boundary) == {0.25, 0.5, 0.75}
    assert "bermudan_value" in b.diagnostics
    no_tree = stopping_benchmark("markov_put", dict(n_paths=2**12, n_steps=20, tree_oracle=False))
    assert no_tree.oracle_value is None and no_tree.boundary == {}


def test_payoff_shape():
    g = markov_put_payoff(0.0, 2.0, 4.0)
    np.testing.assert_allclose(g(0.0, [-10.0, -1.0, 1.0]), [-4.0, -1.0, 0.0])
    assert g(1.0, -1.0) == pytest.approx(-np.exp(-2.0))
