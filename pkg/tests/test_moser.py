import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subharnack.errors import ConfigurationError, DomainError, GeometryError
from subharnack.geometry import DistanceCache, LagMapping
from subharnack.moser import (bridge_nu, bridge_statistic, eval_gamma, log_level_set_check, make_schedule,
                              run_iteration)

import oracles

UNIT_INPUTS = {"C_S": 1, "C_B": 1, "C_HG": 1, "lam": 1, "r": 0.5, "r_inner": 0.25, "tau": 0.1,
               "tau_inner": 0.05, "Q": 2, "n": 2, "ball_volume": 1}


def test_schedule_limits():
    s = make_schedule(1.0, 2, 0.5, 0.25, 0.1, 0.05, 100)
    assert s.k == 2.0
    assert s.radii[0] == 0.5 and s.durations[0] == pytest.approx(0.1)
    assert s.radii[-1] == pytest.approx(0.25, rel=0.02)
    assert np.all(np.diff(s.radii) < 0) and np.all(np.diff(s.durations) < 0)
    np.testing.assert_allclose(s.p[:4], [1, 2, 4, 8])


@pytest.mark.parametrize("args", [(0, 2, .5, .25, .1, .05, 6), (1, 2, .25, .5, .1, .05, 6),
                                  (1, 2, .5, .25, .05, .1, 6), (1, 2, .5, .25, .1, .05, 0)])
def test_schedule_guards(args):
    with pytest.raises(ConfigurationError):
        make_schedule(*args)


def test_eval_gamma_regression():
    # K = 1/0.0625 + 1/0.05 = 36; (r/r')^(Q+Q/k) = 8; bracket = 8*2*36 + 4 = 580; (8K)^1 = 288
    assert eval_gamma(UNIT_INPUTS).value == 2 * 8 * 580 * 288 == 2_672_640


def test_eval_gamma_nonlinear_by_hand():
    inputs = dict(UNIT_INPUTS, C=1.0, lam=1.0)
    # 4 * 2^2 * (36 * 2 / 0.5 + 1 / 0.5) * 288
    assert eval_gamma(inputs, "nonlinear").value == pytest.approx(4 * 4 * (144 + 2) * 288)
    with pytest.raises(ConfigurationError):
        eval_gamma(dict(inputs, lam=0.4), "nonlinear")


@pytest.mark.parametrize("bad", [{"C_S": 0}, {"r_inner": 0.6}, {"Q": float("nan")}])
def test_eval_gamma_guards(bad):
    with pytest.raises(ConfigurationError):
        eval_gamma(dict(UNIT_INPUTS, **bad))
    with pytest.raises(ConfigurationError):
        eval_gamma({k: v for k, v in UNIT_INPUTS.items() if k != "C_B"})


def test_bridge_nu_matches_brute_force_on_random_inputs():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(1, 12))
        eps = float(rng.uniform(0.01, 1.5))
        assert bridge_nu(n, eps) == oracles.bridge_nu_brute(n, eps)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.floats(1e-3, 3.0))
def test_bridge_nu_property(n, eps):
    nu = bridge_nu(n, eps)
    k = 1 + 2 / n
    assert (k + 1) / (2 * k ** nu) < eps
    assert nu == 0 or (k + 1) / (2 * k ** (nu - 1)) >= eps


def _bridge_family():
    return [((0.0, 0.0), 0.04, 0.056), ((0.1, -0.1), 0.04, 0.058), ((-0.2, 0.1), 0.03, 0.06)]


def test_bridge_constant_field_is_one(heat65):
    u, d = heat65
    const = u.with_values(np.full(u.values.shape, 3.7))
    rep = bridge_statistic(const, 0.5, _bridge_family(), DistanceCache(d.frame, d.grid))
    for rec in rep.records:
        assert rec.product == 1.0
        assert rec.forward_bmo < 1e-7 and rec.backward_bmo < 1e-7
    assert rep.nu_required == bridge_nu(2, 0.5)


def test_bridge_on_heat_is_finite(heat65):
    u, d = heat65
    rep = bridge_statistic(u, 0.5, _bridge_family(), DistanceCache(d.frame, d.grid))
    assert np.isfinite(rep.product_max) and rep.product_max >= 1.0 - 1e-12
    assert rep.to_report().passed


def test_bridge_skips_rectangles_outside_time_range(heat65):
    u, d = heat65
    fam = _bridge_family() + [((0.0, 0.0), 0.04, 0.045)]
    with pytest.warns(RuntimeWarning):
        rep = bridge_statistic(u, 0.5, fam, DistanceCache(d.frame, d.grid))
    assert len(rep.skipped) == 1 and len(rep.records) == 3
    with pytest.raises(GeometryError):
        with pytest.warns(RuntimeWarning):
            bridge_statistic(u, 0.5, fam[-1:], DistanceCache(d.frame, d.grid))


def test_lag_mapping_shift():
    lm = LagMapping(0.5)
    (x, t), r = lm.S(((0.0, 0.0), 1.0), 0.1)
    assert t == pytest.approx(1.0 - 2 * 0.01 / 0.25)


def test_log_level_sets_on_heat(heat65):
    u, d = heat65
    rep = log_level_set_check(u, d, 0.12, 0.05, 1.0)
    assert rep.passed
    assert rep.details["s_monotone"]
    assert all(np.isfinite(rep.constants[k]) for k in ("c3", "c3_backward", "c4", "c5"))
    s = np.array(rep.details["s"])
    mu = np.array(rep.details["mu_forward"])
    assert np.all(mu <= rep.constants["c3"] / (0.12 ** 2 * s) + 1e-15)


def test_log_level_sets_constant_field(heat65):
    u, d = heat65
    rep = log_level_set_check(u.with_values(np.full(u.values.shape, 2.0)), d, 0.12, 0.05, 1.0)
    assert rep.constants["c3"] == 0.0 and rep.constants["c4"] == 0.0


def test_log_level_sets_guards(heat65):
    u, d = heat65
    with pytest.raises(GeometryError):
        log_level_set_check(u, d, 0.3, 0.05, 1.0)
    with pytest.raises(DomainError):
        log_level_set_check(u.with_values(u.values - 5), d, 0.12, 0.05, 1.0)


def test_iteration_constant_field(heat65):
    u, d = heat65
    s = make_schedule(1.0, 2, 0.5, 0.25, 0.1, 0.05, 6)
    ch = run_iteration(u.with_values(np.full(u.values.shape, 2.0)), s, d)
    np.testing.assert_allclose(ch.power_means, 2.0)
    assert ch.gamma_fit == pytest.approx(1.0, rel=1e-12)
    assert ch.to_report().passed


def test_iteration_is_monotone_on_heat(heat65):
    u, d = heat65
    ch = run_iteration(u, make_schedule(1.0, 2, 0.5, 0.25, 0.1, 0.05, 6), d)
    assert np.all(np.diff(ch.power_means) >= -1e-12)


def test_iteration_negative_exponents_are_finite(heat65):
    u, d = heat65
    ch = run_iteration(u, make_schedule(-1.0, 2, 0.5, 0.25, 0.1, 0.05, 6), d)
    assert ch.completed == 7 and not ch.partial
    assert np.all(np.isfinite(ch.ratios)) and ch.gamma_fit > 0
