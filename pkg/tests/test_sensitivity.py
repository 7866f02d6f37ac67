import dataclasses

import numpy as np
import pytest

from drbsde import sensitivity as sens
from drbsde.bsde import ObstacleSpec, TerminalSpec, obstacle_from_table, polynomial_basis, solve_bsde
from drbsde.errors import AssumptionViolation, InvalidArgument, NumericFailure
from drbsde.generators import (box_drift_coefficients, constant_coefficients, hamiltonian, linear_generator,
                               softmin_drift_coefficients, trivial_coefficients, zero_generator)
from drbsde.paths import make_grid, simulate_brownian

X_T = TerminalSpec(lambda e: e.values[:, -1, 0], name="X_T")


@pytest.fixture(scope="module")
def ens():
    return simulate_brownian(make_grid(1.0, 20), 1, 2**13, seed=77)


def test_report_validation():
    sens.SensitivityReport(1.0, 0.1, "closed_form")
    for bad in (dict(method="guess"), dict(value=np.nan), dict(std_error=-1.0)):
        kw = dict(value=1.0, std_error=0.1, method="closed_form") | bad
        with pytest.raises(InvalidArgument):
            sens.SensitivityReport(**kw)


def test_martingale_linf_and_l2(ens):
    s = sens.sensitivity_linf_bsde(zero_generator(), X_T, ens)
    assert s.method == "closed_form"
    assert abs(s.value - 1.0) < 0.03
    lo = sens.sensitivity_linf_bsde(zero_generator(), X_T, ens, direction="inf")
    assert lo.value == pytest.approx(-s.value, rel=1e-12)
    l2 = sens.sensitivity_l2_control(trivial_coefficients(), X_T, ens)
    assert abs(l2.value - 1.0) < 0.03
    assert l2.diagnostics["terminal_declared_bounded"] is False
    assert len(l2.diagnostics["z_norm_bands"]) == sens.N_BANDS
    with pytest.raises(InvalidArgument):
        sens.sensitivity_linf_bsde(zero_generator(), X_T, ens, direction="up")


def test_constant_terminal_has_zero_sensitivity(ens):
    c = TerminalSpec(lambda e: np.full(e.n_paths, 3.0), "bounded", 3.0)
    assert sens.sensitivity_linf_bsde(linear_generator(0.3), c, ens).value == 0.0
    assert sens.sensitivity_l2_control(trivial_coefficients(), c, ens).value == 0.0


def test_linear_driver_discount(ens):
    # f = -a y: Z_t = e^{-a(T-t)}, sensitivity int_0^1 e^{-a(1-t)} e^{-a t} dt = e^{-a}
    s = sens.sensitivity_linf_bsde(linear_generator(0.5), X_T, ens)
    assert abs(s.value - np.exp(-0.5)) < 0.03
    assert 0 < s.diagnostics["discount_mass"] < 1


def test_control_with_drift_crosscheck(ens):
    rep = sens.sensitivity_linf_control(constant_coefficients(lam=0.7), X_T, ens)
    assert abs(rep.value - 1.0) < 0.05
    assert rep.diagnostics["measure_crosscheck_z"] < 4.0
    assert rep.diagnostics["lambda_star_max"] == pytest.approx(0.7)
    assert abs(rep.diagnostics["weight_mean"] - 1.0) < 0.05


def test_declared_bounds_are_enforced(ens):
    c = dataclasses.replace(constant_coefficients(lam=0.7), lambda_bound=0.1)
    with pytest.raises(AssumptionViolation):
        sens.sensitivity_linf_control(c, X_T, ens)
    k = dataclasses.replace(constant_coefficients(k=0.5), k_bound=0.1)
    with pytest.raises(AssumptionViolation):
        sens.sensitivity_l2_control(k, X_T, ens)


def test_obstacle_tags(ens):
    untagged = ObstacleSpec(lambda i, e: np.abs(e.values[:, i, 0]))
    with pytest.raises(AssumptionViolation):
        sens.sensitivity_mixed_linf(trivial_coefficients(), untagged, ens)
    sq = dataclasses.replace(untagged, integrability="square_integrable")
    sens.sensitivity_stopping(sq, ens, mode="linf")
    with pytest.raises(AssumptionViolation):
        sens.sensitivity_stopping(sq, ens, mode="l2")
    with pytest.raises(InvalidArgument):
        sens.sensitivity_stopping(sq, ens, mode="l1")


def test_flat_obstacle_zero(ens):
    flat = ObstacleSpec(lambda i, e: np.full(e.n_paths, 2.0), integrability="bounded", bound=2.0)
    for mode in ("linf", "l2"):
        r = sens.sensitivity_stopping(flat, ens, mode=mode)
        assert r.value == 0.0 and r.std_error == 0.0
        assert r.diagnostics["stopped_fraction"] == 1.0


def test_never_binding_mixed_equals_control_bitwise(ens):
    coeffs = constant_coefficients(lam=0.3)
    free = solve_bsde(hamiltonian(coeffs), X_T, ens)
    tab = free.Y + 1.0
    tab[:, -1] = free.Y[:, -1]
    ob = obstacle_from_table(tab, integrability="square_integrable")
    for mixed, ctrl in ((sens.sensitivity_mixed_linf, sens.sensitivity_linf_control),
                        (sens.sensitivity_mixed_l2, sens.sensitivity_l2_control)):
        m = mixed(coeffs, ob, ens)
        c = ctrl(coeffs, X_T, ens, solution=free)
        assert m.value == c.value and m.std_error == c.std_error


@pytest.mark.parametrize("f", [zero_generator(), linear_generator(0.5)])
def test_fd_matches_closed_form(ens, f):
    cf = sens.sensitivity_linf_bsde(f, X_T, ens)
    fd = sens.fd_sensitivity("bsde", f, X_T, ens)
    assert fd.method == "finite_difference" and fd.radius == 0.05
    assert abs(cf.value - fd.value) / cf.value < 0.05
    plain = sens.fd_sensitivity("bsde", f, X_T, ens, richardson=False)
    assert "slope_r_half" not in plain.diagnostics
    assert sens.richardson_slope("bsde", f, X_T, 0.05, ens) == fd.value


def test_robust_value_monotone_in_radius(ens):
    v1 = sens.robust_value_fd("control", trivial_coefficients(), X_T, 0.05, ens)
    v2 = sens.robust_value_fd("control", trivial_coefficients(), X_T, 0.1, ens)
    assert v1.value_0 <= v1.value_r <= v2.value_r
    value, base, slope = v1
    assert slope == pytest.approx((value - base) / 0.05)
    with pytest.raises(InvalidArgument):
        sens.robust_value_fd("control", trivial_coefficients(), X_T, 0.0, ens)
    with pytest.raises(InvalidArgument):
        sens.fd_sensitivity("bsde", zero_generator(), X_T, ens, r=-1.0)
    with pytest.raises(InvalidArgument):
        sens.fd_sensitivity("pde", zero_generator(), X_T, ens)


def test_dual_curve_external_hook():
    curve = sens.dual_curve(g=lambda g: g + g * g, gamma_grid=np.logspace(-6, 2, 161), radii=[0.0, 0.01, 0.1])
    assert curve.G0 == 0.0
    assert curve.secant == pytest.approx(1.0, abs=1e-4)
    assert curve.implied_sensitivity == pytest.approx(1.0, abs=1e-4)
    assert curve.closed_form_slope == pytest.approx(1.0, abs=1e-4)  # 2 sqrt(1 / 4)
    assert curve.dual_values[0] == 0.0
    slopes = curve.slopes()
    assert np.isnan(slopes[0]) and slopes[1] == pytest.approx(1.0, abs=2e-2)


def test_dual_curve_monte_carlo(ens):
    grid = np.logspace(-3, -1, 5)
    curve = sens.dual_curve("control", trivial_coefficients(), X_T, ens, gamma_grid=grid, radii=[0.0, 0.05])
    l2 = sens.sensitivity_l2_control(trivial_coefficients(), X_T, ens)
    assert abs(curve.implied_sensitivity - l2.value) / l2.value < 0.05
    assert curve.diagnostics["solver_failures"] == []
    assert curve.dual_values[0] == curve.G0
    rep = sens.dual_sensitivity(curve)
    assert rep.method == "dual_curve" and rep.std_error > 0


def test_dual_curve_rejects_bad_grid(ens):
    with pytest.raises(InvalidArgument):
        sens.dual_curve("control", trivial_coefficients(), X_T, ens, gamma_grid=[1.0])
    with pytest.raises(InvalidArgument):
        sens.dual_curve("control", trivial_coefficients(), X_T, ens, gamma_grid=[0.1, 1.0], radii=[-1.0])
    with pytest.raises(InvalidArgument):
        sens.dual_curve("control", trivial_coefficients(), X_T, None, gamma_grid=[0.1, 1.0])


def test_dual_curve_unstable_gamma_raises():
    e = simulate_brownian(make_grid(1.0, 50), 1, 4096, seed=2)
    with pytest.raises(NumericFailure):
        sens.dual_curve("control", trivial_coefficients(), X_T, e, gamma_grid=[50.0, 100.0])


def test_control_expansion_first_order(ens):
    c = softmin_drift_coefficients(0.5)
    zero = sens.control_expansion(c, X_T, 0.0, ens)
    assert np.array_equal(zero.alpha_linear, zero.alpha_0)
    small = sens.control_expansion(c, X_T, 0.05, ens)
    big = sens.control_expansion(c, X_T, 0.2, ens)
    # the remainder is second order: it shrinks faster than the correction
    assert small.rms_gap < 0.2 * small.correction_rms
    assert small.rms_gap / big.rms_gap < 0.5 * small.correction_rms / big.correction_rms
    with pytest.raises(InvalidArgument):
        sens.control_expansion(box_drift_coefficients(), X_T, 0.1, ens)
