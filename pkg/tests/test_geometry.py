import math

import numpy as np
import pytest

from subharnack.errors import ConfigurationError, GeometryError
from subharnack.frames import euclidean, grushin, heisenberg
from subharnack.geometry import (ParabolicRectangle, ball_volume, cacciopoli_rectangles, cc_distance_field,
                                 doubling_constant, geodesic_flow, harnack_rectangles, lag_map,
                                 make_cutoff, nsw_exponent, parabolic_distance)
from subharnack.grid import Grid

import oracles


def test_euclidean_distance_is_radius(euclid_disk_field):
    f = euclid_disk_field
    g = f.grid
    r = np.hypot(g.coordinate(0), g.coordinate(1))
    ok = np.isfinite(f.values)
    assert np.abs(f.values - r)[ok].max() < 0.01
    assert ok[r < 0.85].all()


@pytest.mark.parametrize("r", [0.3, 0.5, 0.8])
def test_euclidean_disk_area(euclid_disk_field, r):
    assert ball_volume(euclid_disk_field, r) == pytest.approx(math.pi * r * r, rel=0.03)


def test_heisenberg_against_exact_distance(heisenberg_cube_field):
    f = heisenberg_cube_field
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 41, size=(400, 3))
    errs = []
    for i in idx:
        p = f.grid.node_point(i)
        exact = oracles.heisenberg_distance(*p)
        if exact < 0.7 and exact > 0.1:
            errs.append(abs(f.values[tuple(i)] - exact) / exact)
    assert len(errs) > 50
    assert max(errs) < 0.02


@pytest.mark.parametrize("z", [0.005, 0.01, 0.014])
def test_heisenberg_vertical_axis(heisenberg_ball_field, z):
    assert heisenberg_ball_field.at((0, 0, z)) == pytest.approx(2 * math.sqrt(math.pi * z), rel=0.02)


def test_grushin_axis():
    g = Grid((-1, -1), (1, 1), (81, 81))
    f = cc_distance_field(grushin(), g, (40, 40), horizon=0.9)
    for y in (0.05, 0.1):
        assert f.at((0, y)) == pytest.approx(oracles.grushin_axis_distance(y), rel=0.03)
    for x in (0.2, 0.5):
        assert f.at((x, 0)) == pytest.approx(x, abs=1e-9)


def test_heisenberg_doubling(heisenberg_ball_field):
    rep = doubling_constant(heisenberg_ball_field, [0.1, 0.15, 0.2])
    assert rep.Q == pytest.approx(4.0, abs=0.3)
    for ratio in rep.ratios.values():
        assert ratio == pytest.approx(16.0, rel=0.10)
    assert rep.C_B > 0 and rep.A == pytest.approx(2 ** (rep.Q + 1) / rep.C_B)


def test_euclidean_doubling(euclid_disk_field):
    rep = doubling_constant(euclid_disk_field, [0.2, 0.4])
    assert rep.Q == pytest.approx(2.0, abs=0.05)


def test_ball_volume_guards(euclid_disk_field):
    with pytest.raises(GeometryError):
        ball_volume(euclid_disk_field, 0.95)
    with pytest.raises(ConfigurationError):
        ball_volume(euclid_disk_field, -1.0)


@pytest.mark.parametrize("theta,w", [(0.0, 2.0), (1.0, -5.0), (2.5, 8.0)])
def test_geodesic_endpoints_match_exact_distance(theta, w):
    """A normal geodesic of length T < 2 pi / |w| is minimising, so d(end) = T."""
    T = 0.5
    P0 = np.array([[math.cos(theta), math.sin(theta), w]])
    X, _ = geodesic_flow(heisenberg(), np.zeros(3), P0, T / 400, 400, record=False)
    assert oracles.heisenberg_distance(*X[0]) == pytest.approx(T, rel=1e-6)


CUTOFF_PAIRS = [(0.1, 0.2), (0.15, 0.3), (0.2, 0.4), (0.1, 0.3), (0.2, 0.3), (0.25, 0.45)]


def test_cutoff_constant_is_radius_independent(heisenberg_cube_field):
    consts = [make_cutoff(heisenberg_cube_field, a, b, 0.01, 0.02).C_HG for a, b in CUTOFF_PAIRS]
    consts = np.array(consts)
    assert np.all(consts > 0)
    assert (consts.max() - consts.min()) / consts.mean() < 0.25


def test_cutoff_shape(euclid_disk_field):
    c = make_cutoff(euclid_disk_field, 0.3, 0.6, 0.05, 0.1)
    d = euclid_disk_field.values
    assert np.all(c.psi2[d <= 0.3] == 1.0) and np.all(c.psi2[d >= 0.6] == 0.0)
    assert c.C_HG == pytest.approx(1.5, rel=0.1)
    v = c.values([0.0, 0.025, 0.05, 0.1])
    np.testing.assert_allclose(v[:, 32 * 2, 64], [0.0, 0.5, 1.0, 1.0])


def test_cutoff_rejects_close_balls(euclid_disk_field):
    with pytest.raises(ConfigurationError):
        make_cutoff(euclid_disk_field, 0.45, 0.5, 0.05, 0.1)


def test_rectangles():
    Rp, R = cacciopoli_rectangles((0, 0), 0.25, 0.5, 0.05, 0.1, t0=1.0)
    assert (R.t0, R.t1) == (1.0, 1.1) and Rp.t0 == pytest.approx(1.05)
    R, Rplus, Rminus = harnack_rectangles((0, 0), 0.4, 0.8)
    assert Rplus.r == pytest.approx(0.1)
    assert (Rminus.t0, Rminus.t1) == pytest.approx((0.1, 0.8 / 6))
    assert (Rplus.t0, Rplus.t1) == pytest.approx((0.7, 0.8))
    with pytest.raises(ConfigurationError):
        harnack_rectangles((0, 0), 0.4, 0.8, minus=(0.5, 0.2))
    with pytest.raises(ConfigurationError):
        ParabolicRectangle((0, 0), 0.1, 1.0, 1.0)


def test_parabolic_distance_modes():
    p, q = ((0.0, 0.0), 0.0), ((0.3, 0.4), 0.09)
    assert parabolic_distance(p, q, "max", dcc=0.5) == pytest.approx(0.5)
    assert parabolic_distance(p, q, "sum", dcc=0.5) == pytest.approx(0.8)
    assert parabolic_distance(p, ((0.0, 0.0), 0.25)) == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        parabolic_distance(p, q)


def test_lag_maps():
    (x, t), r = lag_map(((0.0, 0.0), 1.0), 0.2)
    assert t == pytest.approx(1.0 - 2 * 0.04) and r == 0.2
    (x, t), r = lag_map(((0.0, 0.0), 1.0), 0.2, eta=0.5)
    assert t == pytest.approx(1.0 - 2 * 0.04 / 0.25)


@pytest.mark.parametrize("name", ["heisenberg", "grushin", "euclidean"])
def test_nsw_exponent(name, heisenberg_cube_field):
    if name == "heisenberg":
        f = heisenberg_cube_field
        lo, hi = 0.4, 0.6
    elif name == "grushin":
        f = cc_distance_field(grushin(), Grid((-0.5, -0.1), (0.5, 0.1), (41, 41)), (20, 20), horizon=0.8)
        lo, hi = 0.4, 0.6
    else:
        f = cc_distance_field(euclidean(2), Grid((-0.5, -0.5), (0.5, 0.5), (41, 41)), (20, 20), horizon=0.8)
        lo, hi = 0.95, 1.05
    slope, info = nsw_exponent(f)
    assert lo < slope < hi
    assert info["c_inv"] > 0
