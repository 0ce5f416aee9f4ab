import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subharnack.errors import ConfigurationError, DomainError
from subharnack.functionals import (check_cacciopoli, check_poincare, check_sobolev, compute_HMD, p_norm,
                                    poincare_quotient, power_transform, predicted_cacciopoli_constants,
                                    time_reversed)
from subharnack.geometry import ParabolicRectangle, cacciopoli_rectangles
from subharnack.grid import GridFunction
from subharnack.solver import identity_coefficients, mean_curvature_flux

# Neumann Poincare constant of the unit disk: 1 / j'_{1,1}^2
DISK_POINCARE = 1.0 / 1.8411837813406593 ** 2


def test_hmd_of_constant_and_linear(heat65):
    u, d = heat65
    rect = ParabolicRectangle((0, 0), 0.5, 0.0, 0.1)
    c = compute_HMD(u.with_values(np.full(u.values.shape, 2.0)), rect, d)
    assert (c.H, c.M, c.D) == pytest.approx((4.0, 4.0, 0.0))
    x = np.broadcast_to(u.grid.coordinate(0), u.values.shape)
    lin = compute_HMD(u.with_values(x.copy()), rect, d)
    assert lin.H == pytest.approx(0.25 ** 2, rel=0.05)
    assert lin.D == pytest.approx(1.0, abs=1e-12)


def test_p_norm_limits(heat65):
    u, d = heat65
    rect = ParabolicRectangle((0, 0), 0.5, 0.05, 0.1)
    vmax = p_norm(u, math.inf, rect, d).value
    vmin = p_norm(u, -math.inf, rect, d).value
    means = [p_norm(u, p, rect, d).value for p in (-4000, -8, -1, 1, 8, 4000)]
    assert vmin <= means[0] and means[-1] <= vmax
    assert np.all(np.diff(means) >= -1e-12)
    assert vmax - means[-1] < 0.1 * (vmax - vmin)
    with pytest.raises(ConfigurationError):
        p_norm(u, 0.0, rect, d)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5).filter(lambda p: abs(p) > 1e-3), st.floats(0.1, 10))
def test_power_mean_homogeneous(p, alpha):
    from subharnack.functionals import _power_mean
    vals = np.linspace(0.5, 2.0, 11)
    assert _power_mean(alpha * vals, p) == pytest.approx(alpha * _power_mean(vals, p), rel=1e-10)


@pytest.mark.parametrize("p,regime", [(2.0, "subsolution"), (-1.0, "subsolution"), (0.75, "supersolution"),
                                      (1.0, "solution")])
def test_power_transform_regime(heat65, p, regime):
    v = power_transform(heat65[0], p)
    assert v.meta["regime"] == regime
    np.testing.assert_allclose(v.values, heat65[0].values ** p)


def test_power_transform_needs_positive(heat65):
    u = heat65[0]
    with pytest.raises(DomainError):
        power_transform(u.with_values(u.values - 10.0), -1.0)


def test_time_reversal_involution(heat65):
    u = heat65[0]
    w = time_reversed(time_reversed(u))
    np.testing.assert_array_equal(w.values, u.values)
    np.testing.assert_allclose(w.times, u.times)


@pytest.mark.parametrize("p", [1.0, 2.0, -1.0, 0.75])
def test_cacciopoli_on_heat(heat65, p):
    u, d = heat65
    Rp, R = cacciopoli_rectangles((0, 0), 0.25, 0.5, 0.05, 0.1)
    rep = check_cacciopoli(u, p, Rp, R, d, identity_coefficients(2))
    assert rep.passed
    assert rep.details["direction_check"]["holds"]
    assert rep.constants["C1_fitted"] <= rep.constants["C1"]
    assert rep.details["time_reversed"] == (p == 0.75)


def test_cacciopoli_literal_reversed_inequality_fails(heat65):
    """The literal 'LHS >= C RHS' reading at p < 0 contradicts the forward inequality that holds."""
    u, d = heat65
    Rp, R = cacciopoli_rectangles((0, 0), 0.25, 0.5, 0.05, 0.1)
    rep = check_cacciopoli(u, -1.0, Rp, R, d, identity_coefficients(2))
    assert rep.details["gradient"]["holds"]
    assert not rep.details["literal_reversed"]["gradient_holds"]


@pytest.mark.parametrize("p,regime", [(0.4, "solution"), (2.0, "supersolution"), (0.75, "subsolution")])
def test_cacciopoli_regime_guards(heat65, p, regime):
    u, d = heat65
    Rp, R = cacciopoli_rectangles((0, 0), 0.25, 0.5, 0.05, 0.1)
    with pytest.raises(ConfigurationError):
        check_cacciopoli(u, p, Rp, R, d, identity_coefficients(2), regime=regime)


def test_predicted_constants():
    K = 1.5 ** 2 / 0.25 ** 2 + 1 / 0.05
    co = identity_coefficients(2)
    assert predicted_cacciopoli_constants(co, 1.5, 0.25, 0.5, 0.05, 0.1) == pytest.approx((8 * K, 8 * K, K))
    mc = mean_curvature_flux(2, 1.0)
    C1, C2, _ = predicted_cacciopoli_constants(mc, 1.5, 0.25, 0.5, 0.05, 0.1)
    assert C1 == pytest.approx(2 * K / (1 / math.sqrt(2) - 0.5)) and C2 == pytest.approx(8 * K)
    C1r, _, _ = predicted_cacciopoli_constants(co, 1.5, 0.25, 0.5, 0.05, 0.1, p=0.75)
    assert C1r == pytest.approx(8 * K * 0.5625 / 0.5)


def test_poincare_linear_function_exact(euclid_disk_field):
    g = euclid_disk_field.grid
    lhs, rhs = poincare_quotient(g.coordinate(0), euclid_disk_field, 0.5)
    assert lhs / rhs == pytest.approx(0.25, rel=0.03)


def test_poincare_family_below_sharp_constant(euclid_disk_field):
    rep = check_poincare(None, euclid_disk_field, 0.5)
    assert rep.passed
    assert 0.2 < rep.constants["C_P"] <= DISK_POINCARE * 1.05
    assert check_poincare(np.ones(euclid_disk_field.grid.shape), euclid_disk_field, 0.5).constants["C_P"] == 0.0


def test_sobolev_fitted_constant(heat65):
    u, d = heat65
    rep = check_sobolev(u, 0.25, 0.5, d, C_B=1.0, Q=2.0)
    assert rep.passed and 0 < rep.constants["C_S"] < math.inf
    zero = check_sobolev(np.zeros(u.grid.shape), 0.25, 0.5, d, C_B=1.0, Q=2.0)
    assert zero.passed and zero.details["trivial"]
    with pytest.raises(ConfigurationError):
        check_sobolev(u, 0.25, 0.5, d, C_B=1.0, Q=2.0, k=3.0)
