"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines, or as a
script (``python tests/test_acceptance.py``) for a summary table.
"""
import math
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import oracles  # noqa: E402
from subharnack.certify import alpha_from_theta, harnack_certify, holder_certify, structural_check  # noqa: E402
from subharnack.frames import apply_adjoint, apply_field, euclidean, grushin, heisenberg  # noqa: E402
from subharnack.functionals import check_cacciopoli  # noqa: E402
from subharnack.geometry import (DistanceCache, ball_volume, cacciopoli_rectangles, cc_distance_field,  # noqa: E402
                                 doubling_constant, make_cutoff, nsw_exponent)
from subharnack.grid import Grid  # noqa: E402
from subharnack.moser import (bridge_nu, bridge_statistic, eval_gamma, log_level_set_check,  # noqa: E402
                              make_schedule, run_iteration)
from subharnack.solver import (Problem, admissible_dt, checkerboard_coefficients, identity_coefficients,  # noqa: E402
                               linear_flux, mean_curvature_flux, rational_flux, solve, steklov_average,
                               weak_residual)

STABILITY = 0.20
MC_SCALE = 0.1  # keeps |grad u| below the cap M = 1 of the mean-curvature flux


VERDICTS = []  # collected lines, echoed in the pytest terminal summary


def verdict(n, ok, detail):
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def rel_delta(a, b):
    return abs(a - b) / max(abs(a), abs(b))


# ---------------------------------------------------------------------------
# shared scenarios


def bump(P, c, r):
    s2 = np.sum((P - c) ** 2, axis=1) / r ** 2
    out = np.zeros(P.shape[0])
    inside = s2 < 1
    out[inside] = np.exp(-1.0 / (1.0 - s2[inside]))
    return out


def heis_flat_grid(n):
    """Heisenberg box flattened in z so that balls of radius 0.35-0.5 span several z-levels."""
    return Grid((-0.6, -0.6, -0.06), (0.6, 0.6, 0.06), (n, n, n))


def _gauss(P, c=0.1):
    return 1 + np.exp(-4 * np.sum((P - c) ** 2, axis=1))


@lru_cache(maxsize=None)
def cacciopoli_case(frame_name, coeff_name, n, flux_kind="linear"):
    """Solution, distance field and rectangles for the energy estimates."""
    co = identity_coefficients(2) if coeff_name == "identity" else checkerboard_coefficients(2, 2.0, 0.25)
    scale = 1.0
    flux = co
    if flux_kind == "mean-curvature":
        flux, scale = mean_curvature_flux(2, 1.0), MC_SCALE
    if frame_name == "euclidean":
        frame, g = euclidean(2), Grid((-1, -1), (1, 1), (n, n))
        u = solve(Problem(frame, g, flux, lambda P: scale * _gauss(P), 0.1))
        d = cc_distance_field(frame, g, (n // 2, n // 2), horizon=0.7)
        rects = cacciopoli_rectangles((0, 0), 0.25, 0.5, 0.05, 0.1)
    else:
        frame, g = heisenberg(), heis_flat_grid(n)
        u = solve(Problem(frame, g, flux, lambda P: scale * _gauss(P), 0.04, save_every=8))
        d = cc_distance_field(frame, g, (n // 2,) * 3, horizon=0.6)
        rects = cacciopoli_rectangles((0, 0, 0), 0.35, 0.5, 0.02, 0.04)
    return u, d, rects, flux


@lru_cache(maxsize=None)
def plateau_case(sign, scale=1.0, flux_kind="linear"):
    g = Grid((-1, -1), (1, 1), (65, 65))
    flux = identity_coefficients(2) if flux_kind == "linear" else mean_curvature_flux(2, 1.0)

    def u0(P):
        d = np.sqrt(np.sum(P ** 2, axis=1))
        return scale * (1.5 + sign * 0.5 * 0.5 * (1 - np.tanh((d - 0.6) / 0.06)))

    u = solve(Problem(euclidean(2), g, flux, u0, 0.02))
    d = cc_distance_field(euclidean(2), g, (32, 32), horizon=0.7)
    return u, d


@lru_cache(maxsize=None)
def harnack_case(n, flux_kind="checkerboard"):
    g = Grid((-1, -1, -0.5), (1, 1, 0.5), (n, n, n))
    if flux_kind == "checkerboard":
        flux, scale = checkerboard_coefficients(2, 2.0, 0.25), 1.0
    else:
        flux, scale = mean_curvature_flux(2, 1.0), MC_SCALE

    def u0(P):
        return scale * (0.2 + np.exp(-np.sum((P - np.array([0.3, 0, 0])) ** 2, axis=1) / 0.1))

    u = solve(Problem(heisenberg(), g, flux, u0, 0.2, save_every=4))
    d = cc_distance_field(heisenberg(), g, (n // 2,) * 3, horizon=0.75)
    return u, d


@lru_cache(maxsize=None)
def holder_case(n, flux_kind="linear"):
    g = Grid((-1, -1), (1, 1), (n, n))
    if flux_kind == "linear":
        flux, scale = identity_coefficients(2), 1.0
    else:
        flux, scale = mean_curvature_flux(2, 1.0), MC_SCALE
    u = solve(Problem(euclidean(2), g, flux, lambda P: scale * _gauss(P), 0.6, save_every=8))
    return u, DistanceCache(euclidean(2), g)


@lru_cache(maxsize=None)
def bridge_case(n, coeff_name):
    co = identity_coefficients(2) if coeff_name == "identity" else checkerboard_coefficients(2, 2.0, 0.25)
    g = Grid((-1, -1), (1, 1), (n, n))
    u = solve(Problem(euclidean(2), g, co, lambda P: _gauss(P), 0.3, save_every=2))
    return u, DistanceCache(euclidean(2), g)


# ---------------------------------------------------------------------------
# criteria


def criterion_1():
    t0 = time.perf_counter()
    grids = {"euclidean": (euclidean(2), Grid((-1, -1), (1, 1), (41, 41))),
             "heisenberg": (heisenberg(), Grid((-1, -1, -0.5), (1, 1, 0.5), (17, 17, 17))),
             "grushin": (grushin(), Grid((-1, -1), (1, 1), (41, 41)))}
    rng = np.random.default_rng(2024)
    worst = {}
    for name, (frame, g) in grids.items():
        width = np.array(g.hi) - np.array(g.lo)
        w = 0.0
        for _ in range(50):
            c1 = np.array(g.lo) + width * rng.uniform(0.3, 0.7, g.ndim)
            c2 = np.array(g.lo) + width * rng.uniform(0.3, 0.7, g.ndim)
            r = 0.25 * width.min()
            u = (bump(g.points, c1, r) * rng.uniform(0.5, 2)).reshape(g.shape)
            v = (bump(g.points, c2, r) * rng.normal()).reshape(g.shape)
            for i in range(frame.m):
                lhs = np.sum(apply_field(frame, i, u, g) * v)
                rhs = np.sum(u * apply_adjoint(frame, i, v, g))
                w = max(w, abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(v)))
        worst[name] = w
    frame, g = heisenberg(), Grid((-1, -1, -0.5), (1, 1, 0.5), (21, 21, 21))
    dt = 0.9 * admissible_dt(frame, g, 2.0)
    u = solve(Problem(frame, g, checkerboard_coefficients(2, 2.0, 0.25),
                      lambda P: 1 + np.exp(-8 * np.sum(P ** 2, axis=1)), 1000 * dt, dt=dt, save_every=1000))
    drift = abs(u.values[-1].sum() - u.values[0].sum()) / u.values[0].sum()
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-10 and drift < 1e-9 and u.meta["steps"] == 1000 and elapsed < 10
    return verdict(1, ok, f"adjointness max rel err {max(worst.values()):.1e}, "
                          f"mass drift {drift:.1e} over 1000 steps, {elapsed:.1f}s")


def criterion_2():
    t0 = time.perf_counter()
    errs = {}
    for n in (32, 64, 128):
        g = Grid((-2, -2), (2, 2), (n, n))
        u = solve(Problem(euclidean(2), g, identity_coefficients(2), lambda P: oracles.heat_solution(P, 0.0), 0.1))
        errs[n] = np.abs(u.values[-1].ravel() - oracles.heat_solution(g.points, 0.1)).max() / u.values[-1].max()
    orders = [math.log2(errs[32] / errs[64]), math.log2(errs[64] / errs[128])]
    elapsed = time.perf_counter() - t0
    ok = errs[64] <= 0.01 and min(orders) >= 1.0 and elapsed < 60
    return verdict(2, ok, f"64^2 Linf rel err {errs[64]:.2e}, orders {orders[0]:.2f}/{orders[1]:.2f}, {elapsed:.1f}s")


def criterion_3():
    t0 = time.perf_counter()
    g = Grid((-0.5, -0.5, -0.03), (0.5, 0.5, 0.03), (81, 81, 121))
    f = cc_distance_field(heisenberg(), g, (40, 40, 60), horizon=0.45)
    rep = doubling_constant(f, [0.1, 0.15, 0.2])
    ge = Grid((-1, -1), (1, 1), (129, 129))
    fe = cc_distance_field(euclidean(2), ge, (64, 64), horizon=0.9)
    area = {r: ball_volume(fe, r) / (math.pi * r * r) for r in (0.3, 0.5, 0.8)}
    elapsed = time.perf_counter() - t0
    ratios = list(rep.ratios.values())
    ok = (abs(rep.Q - 4) <= 0.3 and all(abs(x / 16 - 1) <= 0.10 for x in ratios)
          and all(abs(a - 1) <= 0.03 for a in area.values()) and elapsed < 120)
    return verdict(3, ok, f"Heisenberg Q={rep.Q:.3f}, doubling {min(ratios):.2f}-{max(ratios):.2f}, "
                          f"Euclidean area/pi r^2 {min(area.values()):.4f}-{max(area.values()):.4f}, {elapsed:.1f}s")


def criterion_4():
    t0 = time.perf_counter()
    g = Grid((-0.5, -0.5, -0.1), (0.5, 0.5, 0.1), (41, 41, 41))
    f = cc_distance_field(heisenberg(), g, (20, 20, 20), horizon=0.8)
    pairs = [(0.1, 0.2), (0.15, 0.3), (0.2, 0.4), (0.1, 0.3), (0.2, 0.3), (0.25, 0.45)]
    consts = np.array([make_cutoff(f, a, b, 0.01, 0.02).C_HG for a, b in pairs])
    spread = (consts.max() - consts.min()) / consts.mean()
    elapsed = time.perf_counter() - t0
    ok = spread < 0.25 and elapsed < 60
    return verdict(4, ok, f"C_HG over 6 radius pairs {consts.min():.3f}-{consts.max():.3f}, "
                          f"spread {100 * spread:.1f}%, {elapsed:.1f}s")


CACCIOPOLI_LEVELS = {"euclidean": (33, 65), "heisenberg": (17, 25)}


def _cacciopoli_suite(flux_kind, coeff_names):
    failures, worst = [], 0.0
    for frame_name, levels in CACCIOPOLI_LEVELS.items():
        for coeff in coeff_names:
            fitted = []
            for n in levels:
                u, d, (Rp, R), flux = cacciopoli_case(frame_name, coeff, n, flux_kind)
                row = {}
                for p in (1.0, 2.0, -1.0):
                    rep = check_cacciopoli(u, p, Rp, R, d, flux)
                    if not rep.passed:
                        failures.append(f"{frame_name}/{coeff}/{n}/p={p:g}")
                    if p < 0 and not rep.details["direction_check"]["holds"]:
                        failures.append(f"{frame_name}/{coeff}/{n}/reversed")
                    row[p] = (rep.constants["C1_fitted"], rep.constants["C2_fitted"])
                fitted.append(row)
            for p in fitted[0]:
                for j in range(2):
                    dlt = rel_delta(fitted[0][p][j], fitted[1][p][j])
                    worst = max(worst, dlt)
                    if dlt >= STABILITY:
                        failures.append(f"{frame_name}/{coeff}/p={p:g}/C{j + 1} unstable ({dlt:.2f})")
    return failures, worst


def criterion_5():
    failures, worst = _cacciopoli_suite("linear", ("identity", "checkerboard"))
    return verdict(5, not failures, f"2 frames x 2 coefficient families x p in {{1,2,-1}}; "
                                    f"worst refinement delta {100 * worst:.1f}%; failures: {failures or 'none'}")


def _moser_chain(scale=1.0, flux_kind="linear"):
    out = {}
    for p0, sign in ((1.0, 1), (-1.0, -1)):
        u, d = plateau_case(sign, scale, flux_kind)
        ch = run_iteration(u, make_schedule(p0, 2, 0.5, 0.25, 0.02, 0.01, 6), d)
        ch.gamma = ch.gamma_fit
        rep = ch.to_report(tol=0.05)
        out[p0] = (rep.passed, ch.gamma_fit, ch.gap / ch.oscillation, rep.details["monotone"],
                   bool(np.all(ch.ratios <= ch.gamma_fit)), ch.completed)
    return out


def criterion_6():
    out = _moser_chain()
    ok = all(v[0] and v[3] and v[4] and v[2] <= 0.05 and v[5] == 7 for v in out.values())
    formula = eval_gamma({"C_S": 1, "C_B": 1, "C_HG": 1, "lam": 1, "r": 0.5, "r_inner": 0.25, "tau": 0.1,
                          "tau_inner": 0.05, "Q": 2, "n": 2, "ball_volume": 1}).value
    detail = "; ".join(f"p0={p:+g}: gamma_fit {v[1]:.3f}, gap/osc {100 * v[2]:.2f}%, monotone {v[3]}"
                       for p, v in out.items())
    return verdict(6, ok and formula == 2_672_640, detail + f"; eval_gamma regression {formula:.0f}")


def criterion_7():
    details, ok = [], True
    for coeff in ("identity", "checkerboard"):
        u0, cache0 = bridge_case(33, coeff)
        const = u0.with_values(np.full(u0.values.shape, 2.3))
        fam = [((0.0, 0.0), 0.1, 0.2), ((0.2, -0.1), 0.1, 0.2), ((-0.1, 0.3), 0.08, 0.18)]
        pc = bridge_statistic(const, 0.5, fam, cache0)
        exact = all(r.product == 1.0 for r in pc.records)
        prods = []
        for n in (33, 65):
            u, cache = bridge_case(n, coeff)
            prods.append(bridge_statistic(u, 0.5, fam, cache).product_max)
        dlt = rel_delta(*prods)
        ok &= exact and all(np.isfinite(prods)) and dlt < STABILITY
        details.append(f"{coeff}: const product exact={exact}, product {prods[0]:.4f}/{prods[1]:.4f} "
                       f"(delta {100 * dlt:.1f}%)")
    rng = np.random.default_rng(7)
    trials = [(int(rng.integers(1, 12)), float(rng.uniform(0.01, 1.5))) for _ in range(20)]
    arith = all(bridge_nu(n, e) == oracles.bridge_nu_brute(n, e) for n, e in trials)
    ok &= arith
    return verdict(7, ok, "; ".join(details) + f"; bridge_nu matches brute force on 20 draws: {arith}")


def criterion_8():
    details, ok = [], True
    u, cache = bridge_case(65, "identity")
    d = cache.get((0.0, 0.0), 0.3)
    hu, hd = harnack_case(17)
    for name, field, dist, r, t0 in (("euclidean", u, d, 0.12, 0.1), ("heisenberg", hu, hd, 0.2, 0.13)):
        rep = log_level_set_check(field, dist, r, t0, 1.0 if name == "euclidean" else 2.0)
        c = rep.constants
        s = np.array(rep.details["s"])
        mu = np.array(rep.details["mu_forward"])
        bound = bool(np.all(mu <= c["c3"] / (r * r * s) * (1 + 1e-12)))
        good = rep.passed and bound and rep.details["s_monotone"] and all(
            np.isfinite(c[k]) for k in ("c3", "c3_backward", "c4", "c5"))
        ok &= good
        details.append(f"{name}: c3={c['c3']:.3g}, c3_back={c['c3_backward']:.3g}, "
                       f"BMO fwd/back {c['c4']:.3g}/{c['c5']:.3g}, monotone {rep.details['s_monotone']}")
    return verdict(8, ok, "; ".join(details))


def _harnack(flux_kind):
    fields, dists = zip(*(harnack_case(n, flux_kind) for n in (17, 33)))
    return harnack_certify(list(fields), list(dists), (0, 0, 0), 0.6, 0.2)


def criterion_9(flux_kind="checkerboard", n=9):
    u, d = harnack_case(17, flux_kind)
    const = harnack_certify(u.with_values(np.full(u.values.shape, 1.7)), d, (0, 0, 0), 0.6, 0.2).ratio
    base = harnack_certify(u, d, (0, 0, 0), 0.6, 0.2).ratio
    scaled = [harnack_certify(u.with_values(a * u.values), d, (0, 0, 0), 0.6, 0.2).ratio
              for a in (2.0 ** -10, 0.5, 8.0, 2.0 ** 20)]
    cert = _harnack(flux_kind)
    ok = const == 1.0 and all(s == base for s in scaled) and cert.passed and np.isfinite(cert.ratio)
    return verdict(n, ok, f"{flux_kind}: constant ratio {const}, scale-invariant {all(s == base for s in scaled)}, "
                          f"ratios 17^3/33^3 {cert.ratios[0]:.4f}/{cert.ratios[1]:.4f} "
                          f"(delta {100 * cert.stability_delta:.1f}%)")


def _holder(flux_kind):
    certs = [holder_certify(*holder_case(n, flux_kind), (0.0, 0.0), 0.3, 0.5) for n in (65, 129)]
    return certs


def criterion_10(flux_kind="linear", n=10, with_nsw=True):
    certs = _holder(flux_kind)
    good = all(c.passed and not c.trivial and 0 < c.theta < 1 and 0 < c.alpha <= 1 and np.isfinite(c.quotient)
               for c in certs)
    dq = rel_delta(certs[0].quotient, certs[1].quotient)
    exact = alpha_from_theta(0.25) == 1.0
    detail = (f"{flux_kind}: alpha(1/4)={alpha_from_theta(0.25)}, theta {certs[-1].theta:.3f}, "
              f"alpha {certs[-1].alpha:.3f}, quotient 65^2/129^2 {certs[0].quotient:.4f}/{certs[1].quotient:.4f} "
              f"(delta {100 * dq:.1f}%)")
    ok = good and exact and dq < STABILITY
    if with_nsw:
        f = cc_distance_field(heisenberg(), Grid((-0.5, -0.5, -0.1), (0.5, 0.5, 0.1), (41, 41, 41)),
                              (20, 20, 20), horizon=0.8)
        eps, _ = nsw_exponent(f)
        ok &= 0.4 < eps < 0.6
        detail += f", Heisenberg NSW exponent {eps:.4f}"
    return verdict(n, ok, detail)


def criterion_11():
    lam = {}
    for name, flux, bound in (("mean-curvature", mean_curvature_flux(2, 1.0), 1 / math.sqrt(2)),
                              ("rational", rational_flux(2, 1.0), 0.5)):
        rep = structural_check(flux)
        c = rep.constants
        lam[name] = rep.passed and c["lam_fit"] >= bound * 0.95 and c["Lam_fit"] <= 1.05 and c["C_fit"] <= 1.05
    g = Grid((-1, -1, -0.5), (1, 1, 0.5), (13, 13, 13))
    co = checkerboard_coefficients(2, 2.0, 0.25)
    a = solve(Problem(heisenberg(), g, co, _gauss, 0.05))
    b = solve(Problem(heisenberg(), g, linear_flux(co), _gauss, 0.05))
    bitwise = bool(np.array_equal(a.values, b.values))
    caccio, worst = _cacciopoli_suite("mean-curvature", ("identity",))
    chain = _moser_chain(MC_SCALE, "mean-curvature")
    moser_ok = all(v[0] and v[3] and v[2] <= 0.05 for v in chain.values())
    harnack_cert = _harnack("mean-curvature")
    holder_certs = _holder("mean-curvature")
    hq = rel_delta(holder_certs[0].quotient, holder_certs[1].quotient)
    holder_ok = all(c.passed and not c.trivial for c in holder_certs) and hq < STABILITY
    ok = all(lam.values()) and bitwise and not caccio and moser_ok and harnack_cert.passed and holder_ok
    return verdict(11, ok, f"structural {lam}, bitwise linear==nonlinear {bitwise}, "
                           f"re-run 5: {'pass' if not caccio else caccio} (worst delta {100 * worst:.1f}%), "
                           f"6: {moser_ok}, 9: ratios {harnack_cert.ratios[0]:.4f}/{harnack_cert.ratios[1]:.4f}, "
                           f"10: quotient delta {100 * hq:.1f}%")


def criterion_12():
    g = Grid((-1, -1), (1, 1), (33, 33))
    u = solve(Problem(euclidean(2), g, identity_coefficients(2),
                      lambda P: 1 + np.exp(-8 * np.sum(P ** 2, axis=1)), 0.1))
    hs, errs = [], []
    for k in (8, 4, 2):
        uh = steklov_average(u, k * u.dt)
        hs.append(k * u.dt)
        errs.append(np.sqrt(np.mean((uh.values - u.values[: uh.nt]) ** 2)))
    rate = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    orders = []
    for n in (33, 65):
        g = Grid((-1, -1), (1, 1), (n, n))
        u = solve(Problem(euclidean(2), g, identity_coefficients(2),
                          lambda P: 1 + np.exp(-8 * np.sum(P ** 2, axis=1)), 0.1))
        d = cc_distance_field(euclidean(2), g, (n // 2, n // 2))
        c = make_cutoff(d, 0.3, 0.6, 0.02, 0.08)
        uh = steklov_average(u, 4 * u.dt)
        orders.append((weak_residual(u, c, euclidean(2), identity_coefficients(2)),
                       weak_residual(uh, c, euclidean(2), identity_coefficients(2))))
    order_u = math.log2(abs(orders[0][0] / orders[1][0]))
    order_h = math.log2(abs(orders[0][1] / orders[1][1]))
    ok = rate >= 0.9 and abs(order_h - order_u) < 0.5 and all(abs(h) <= 2 * abs(r) for r, h in orders)
    return verdict(12, ok, f"Steklov rate {rate:.3f}; residual order u {order_u:.2f}, u_h {order_h:.2f}; "
                           f"residuals at 65^2 {orders[1][0]:.2e}/{orders[1][1]:.2e}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10, criterion_11, criterion_12]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i + 1:02d}" for i in range(len(CRITERIA))])
def test_acceptance(criterion):
    assert criterion()


if __name__ == "__main__":
    results = []
    for crit in CRITERIA:
        try:
            results.append(bool(crit()))
        except Exception as exc:  # report and continue with the next criterion
            print(f"[{crit.__name__}] ERROR: {type(exc).__name__}: {exc}")
            results.append(False)
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
