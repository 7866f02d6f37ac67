"""The numba and numpy variants of every kernel agree to rounding."""

import numpy as np
import pytest

from drbsde import _accel, kernels

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def both(monkeypatch, fn, *args):
    monkeypatch.delenv(_accel.DISABLE_ENV, raising=False)
    fast = fn(*args)
    monkeypatch.setenv(_accel.DISABLE_ENV, "1")
    assert not _accel.numba_enabled()
    slow = fn(*args)
    return fast, slow


def test_flag_parsing(monkeypatch):
    for v, on in (("", True), ("0", True), ("1", False), ("TRUE", False), ("yes", False)):
        monkeypatch.setenv(_accel.DISABLE_ENV, v)
        assert _accel.numba_enabled() is on


def test_log_stoch_exp(monkeypatch, rng):
    beta = rng.normal(size=(300, 12, 2))
    dX = rng.normal(size=(300, 12, 2)) * 0.3
    a, b = both(monkeypatch, kernels.log_stoch_exp, beta, dX, 0.09, 2, 11)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    a0, _ = both(monkeypatch, kernels.log_stoch_exp, beta, dX, 0.09, 4, 4)
    assert np.all(a0 == 0)


def test_weighted_sum(monkeypatch, rng):
    N, n, d = 500, 9, 2
    a = rng.normal(size=(N, n)) * 0.2
    b = rng.normal(size=(N, n, d)) * 0.5
    c = rng.random((N, n))
    dX = rng.normal(size=(N, n, d)) * 0.3
    stop = rng.integers(0, n + 1, N)
    x, y = both(monkeypatch, kernels.weighted_sum, a, b, c, dX, 0.1, stop)
    np.testing.assert_allclose(x, y, rtol=1e-11)


def test_gram(monkeypatch, rng):
    C = rng.normal(size=(10000, 5))
    T = rng.normal(size=(10000, 2))
    (G1, R1), (G2, R2) = both(monkeypatch, kernels.gram, C, T)
    np.testing.assert_allclose(G1, G2, rtol=1e-11)
    np.testing.assert_allclose(R1, R2, rtol=1e-11)
    np.testing.assert_allclose(G1, C.T @ C, rtol=1e-10)
    G3, R3 = kernels.gram(C)
    assert R3.shape == (5, 0)


def test_gram_workers_bitwise(monkeypatch, rng):
    monkeypatch.setenv(_accel.DISABLE_ENV, "1")
    C = rng.normal(size=(20000, 4))
    assert np.array_equal(kernels.gram(C, workers=1)[0], kernels.gram(C, workers=3)[0])


def test_first_hit(monkeypatch, rng):
    gap = rng.random((400, 11)) - 0.05
    tol = np.full(11, 0.01)
    a, b = both(monkeypatch, kernels.first_hit, gap, tol)
    assert np.array_equal(a, b)
    never = np.ones((3, 5))
    x, _ = both(monkeypatch, kernels.first_hit, never, np.zeros(5))
    # the last node always counts as a hit
    assert np.all(x == 4)


def test_poly_features(monkeypatch, rng):
    from drbsde.bsde import monomial_exponents
    s = rng.normal(size=(200, 2))
    e = monomial_exponents(2, 3)
    a, b = both(monkeypatch, kernels.poly_features, s, e)
    np.testing.assert_allclose(a, b, rtol=1e-13)
    assert e.shape == (10, 2)
    np.testing.assert_array_equal(a[:, 0], 1.0)


def test_stopping_tree(monkeypatch, rng):
    M = 60
    g = rng.normal(size=(M + 1, M + 1))
    allowed = (np.arange(M + 1) % 3 == 0).astype(np.uint8)
    (v1, s1), (v2, s2) = both(monkeypatch, kernels.stopping_tree, g, allowed)
    assert v1 == pytest.approx(v2, rel=1e-13)
    assert np.array_equal(s1, s2)
    (v3, _), _ = both(monkeypatch, kernels.stopping_tree, g, None)
    assert v3 <= v1 + 1e-12  # more exercise dates can only lower an infimum


def test_full_solve_agrees_across_backends(monkeypatch):
    from drbsde.bsde import TerminalSpec, solve_bsde
    from drbsde.generators import constant_coefficients, hamiltonian
    from drbsde.paths import make_grid, simulate_brownian

    ens = simulate_brownian(make_grid(1.0, 10), 1, 4096, seed=2)
    xi = TerminalSpec(lambda e: np.maximum(e.values[:, -1, 0], 0.0))
    f = hamiltonian(constant_coefficients(k=0.1, lam=0.4))
    a, b = both(monkeypatch, lambda: solve_bsde(f, xi, ens))
    np.testing.assert_allclose(a.Y, b.Y, rtol=1e-10, atol=1e-12)
    assert a.y0 == pytest.approx(b.y0, rel=1e-12)


def test_benchmark_script_runs(tmp_path, capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    out = tmp_path / "b.json"
    mod.main(["--paths", "512", "--steps", "4", "--repeat", "1", "--json", str(out)])
    assert "solve_bsde" in capsys.readouterr().out
    assert out.exists()
