"""Harnack and Hölder certificates for solved fields.

The Harnack certificate reads ``max_{R-} u / min_{R+} u`` at several grid
resolutions.  The Hölder certificate measures oscillations over parabolic
neighbourhoods shrinking by a factor 4 in the metric ``max(d_cc, sqrt|t-s|)``
and fits the decay exponent.  ``structural_check`` samples a nonlinear flux
and reports its tightest structural constants.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GeometryError, StructuralViolation
from .functionals import resolution_of
from .geometry import CCDistanceField, DistanceCache, ParabolicRectangle, harnack_rectangles
from .grid import Grid, GridFunction
from .report import CertificationReport, margin_of
from .solver import NonlinearFlux

log = logging.getLogger(__name__)

HARNACK_STABILITY = 0.2
HOLDER_PAIRS = 500


def _rect_values(u: GridFunction, rect: ParabolicRectangle, distfield: CCDistanceField):
    ball = rect.spatial_mask(distfield).ravel()
    if not ball.any():
        raise GeometryError(f"{rect.role} ball of radius {rect.r} contains no grid node")
    levels = rect.time_mask(u)
    return u.values.reshape(u.nt, -1)[levels][:, ball]


# ---------------------------------------------------------------------------
# Harnack


@dataclass
class HarnackCertificate:
    rectangles: dict
    sups: list
    infs: list
    ratios: list
    resolutions: list
    stability_delta: float
    tolerance: float
    diagnostic: str = ""

    @property
    def ratio(self):
        return self.ratios[-1]

    @property
    def passed(self):
        return (not self.diagnostic and all(np.isfinite(self.ratios))
                and (len(self.ratios) < 2 or self.stability_delta < self.tolerance))

    def to_report(self) -> CertificationReport:
        return CertificationReport(
            "harnack", bool(self.passed), lhs=float(self.sups[-1]), rhs=float(self.infs[-1]),
            constants={"C_fit": float(self.ratio)},
            margin=float(self.tolerance - self.stability_delta) if np.isfinite(self.stability_delta) else float("nan"),
            resolution=self.resolutions[-1],
            details={"ratios": self.ratios, "sups": self.sups, "infs": self.infs,
                     "resolutions": self.resolutions, "stability_delta": self.stability_delta,
                     "rectangles": self.rectangles, "diagnostic": self.diagnostic,
                     "note": "only positive solutions are certified; u -> u + c changes the ratio"})


def harnack_certify(fields, distfields, center, r: float, tau: float, t0: float = 0.0,
                    radius_fraction: float = 0.25, minus=(1 / 8, 1 / 6), plus=(7 / 8, 1.0),
                    tolerance: float = HARNACK_STABILITY) -> HarnackCertificate:
    """``max_{R-} u / min_{R+} u`` at each resolution, coarsest first.

    ``fields`` and ``distfields`` are parallel lists (or single objects); each
    distance field must have its origin at ``center`` on its field's grid.
    """
    if isinstance(fields, GridFunction):
        fields, distfields = [fields], [distfields]
    if len(fields) != len(distfields) or not fields:
        raise ConfigurationError("need one distance field per solution")
    R, Rplus, Rminus = harnack_rectangles(center, r, tau, t0, radius_fraction, minus, plus)
    sups, infs, ratios, res = [], [], [], []
    diagnostic = ""
    for u, df in zip(fields, distfields):
        R.spatial_mask(df)
        vals_R = _rect_values(u, R, df)
        hi = float(_rect_values(u, Rminus, df).max())
        lo = float(_rect_values(u, Rplus, df).min())
        sups.append(hi)
        infs.append(lo)
        res.append(resolution_of(u))
        if lo <= 0 or vals_R.min() <= 0:
            diagnostic = (f"positivity lost at resolution {list(u.grid.shape)}: "
                          f"min over R+ = {lo:.3e}, min over R = {float(vals_R.min()):.3e}")
            ratios.append(float("inf"))
        else:
            ratios.append(hi / lo)
    if len(ratios) >= 2 and all(np.isfinite(ratios[-2:])):
        delta = abs(ratios[-1] - ratios[-2]) / ratios[-1]
    else:
        delta = float("nan") if len(ratios) < 2 else float("inf")
    rects = {"R": R.to_dict(), "R+": Rplus.to_dict(), "R-": Rminus.to_dict()}
    return HarnackCertificate(rects, sups, infs, ratios, res, float(delta), tolerance, diagnostic)


# ---------------------------------------------------------------------------
# oscillation step


def _ratio(hi, lo):
    if lo > 0:
        return hi / lo
    return 1.0 if hi <= 0 else math.inf


def harnack_family_gamma(u: GridFunction, R: ParabolicRectangle, Rplus: ParabolicRectangle,
                         Rminus: ParabolicRectangle, distfield: CCDistanceField) -> float:
    """Largest ``max_{R-} w / min_{R+} w`` over ``w in {u, M - u, u - m}``.

    ``M - u`` and ``u - m`` are the nonnegative solutions the oscillation
    argument applies the Harnack inequality to, with ``M, m`` taken over ``R``.
    """
    vR = _rect_values(u, R, distfield)
    vp = _rect_values(u, Rplus, distfield)
    vm = _rect_values(u, Rminus, distfield)
    M, m = float(vR.max()), float(vR.min())
    return max(_ratio(float(vm.max()), float(vp.min())),
               _ratio(M - float(vm.min()), M - float(vp.max())),
               _ratio(float(vm.max()) - m, float(vp.min()) - m))


@dataclass
class OscillationStep:
    M: float
    m: float
    M_plus: float
    m_plus: float
    mu_minus: float
    omega: float
    omega_plus: float
    theta_step: float
    gamma: float = float("nan")
    upper_ok: bool = None
    lower_ok: bool = None

    @property
    def gamma_needed(self):
        """Smallest ``gamma`` making each one-sided bound hold (upper, lower)."""
        def q(a, b):
            return a / b if b > 0 else (1.0 if a <= 0 else math.inf)
        return q(self.M - self.mu_minus, self.M - self.M_plus), q(self.mu_minus - self.m, self.m_plus - self.m)

    @property
    def theta_harnack(self):
        """``(gamma - 1) / gamma`` for the supplied ``gamma``."""
        return (self.gamma - 1.0) / self.gamma if np.isfinite(self.gamma) else float("nan")

    def to_report(self, tol=0.1) -> CertificationReport:
        th = self.theta_harnack
        ok = np.isfinite(th) and self.theta_step <= th * (1 + tol)
        return CertificationReport(
            "oscillation_step", bool(ok), lhs=self.theta_step, rhs=th,
            constants={"gamma_fit": self.gamma, "theta_step": self.theta_step, "theta": th},
            margin=margin_of(self.theta_step, th, 1.0, tol) if np.isfinite(th) else float("nan"),
            details={k: getattr(self, k) for k in
                     ("M", "m", "M_plus", "m_plus", "mu_minus", "omega", "omega_plus",
                      "upper_ok", "lower_ok")} | {"gamma_needed": list(self.gamma_needed)})


def oscillation_step(u: GridFunction, R: ParabolicRectangle, Rplus: ParabolicRectangle,
                     Rminus: ParabolicRectangle, distfield: CCDistanceField,
                     gamma: float = None) -> OscillationStep:
    """``M, m`` over ``R``, ``M+, m+`` over ``R+``, ``mu-`` the mean over ``R-``.

    The one-sided bounds ``M - M+ >= (M - mu-)/gamma`` and
    ``m+ - m >= (mu- - m)/gamma`` are evaluated with ``gamma`` or, when it is
    omitted, with :func:`harnack_family_gamma`.
    """
    vR = _rect_values(u, R, distfield)
    vp = _rect_values(u, Rplus, distfield)
    vm = _rect_values(u, Rminus, distfield)
    M, m = float(vR.max()), float(vR.min())
    Mp, mp = float(vp.max()), float(vp.min())
    mu = float(vm.mean())
    omega, omega_p = M - m, Mp - mp
    theta = omega_p / omega if omega > 0 else 0.0
    out = OscillationStep(M, m, Mp, mp, mu, omega, omega_p, float(theta))
    if gamma is None:
        gamma = harnack_family_gamma(u, R, Rplus, Rminus, distfield)
    if gamma is not None:
        if not gamma >= 1:
            raise ConfigurationError("gamma must be >= 1")
        out.gamma = float(gamma)
        slack = 1e-12 * max(1.0, abs(M), abs(m))
        out.upper_ok = bool(M - Mp >= (M - mu) / gamma - slack)
        out.lower_ok = bool(mp - m >= (mu - m) / gamma - slack)
    return out


# ---------------------------------------------------------------------------
# Hölder


def alpha_from_theta(theta: float) -> float:
    """``-log(theta) / log(4)``."""
    if not 0 < theta < 1:
        raise ConfigurationError(f"theta must lie in (0, 1), got {theta}")
    return -math.log(theta) / math.log(4.0)


@dataclass
class HolderCertificate:
    scales: list
    omegas: list
    theta: float
    alpha_fit: float
    alpha_pred: float
    alpha: float
    quotient: float
    pairs: int
    trivial: bool = False
    resolution: dict = field(default_factory=dict)

    @property
    def passed(self):
        if self.trivial:
            return True
        return bool(0 < self.theta < 1 and 0 < self.alpha <= 1 and np.isfinite(self.quotient))

    def table(self):
        rows = [(i, s, w) for i, (s, w) in enumerate(zip(self.scales, self.omegas))]
        return rows

    def to_report(self) -> CertificationReport:
        return CertificationReport(
            "holder", self.passed, lhs=self.quotient, rhs=float("nan"),
            constants={"theta": self.theta, "alpha_fit": self.alpha_fit, "alpha_pred": self.alpha_pred,
                       "alpha": self.alpha, "C_holder": self.quotient},
            margin=float(1 - self.theta) if np.isfinite(self.theta) else float("nan"),
            resolution=self.resolution,
            details={"scales": self.scales, "omegas": self.omegas, "pairs": self.pairs,
                     "trivial": self.trivial})


def _neighbourhood(u, distfield, rho, tc):
    ball = (distfield.values < rho).ravel()
    levels = u.time_mask(tc - rho * rho, tc + rho * rho)
    if ball.sum() * levels.sum() < 2:
        raise GeometryError(f"parabolic neighbourhood of radius {rho:.3g} is under-resolved "
                            f"({int(ball.sum())} nodes, {int(levels.sum())} time levels)")
    return u.values.reshape(u.nt, -1)[levels][:, ball]


def holder_certify(u: GridFunction, distances: DistanceCache, center, t_center: float, k: float,
                   levels: int = 3, pairs: int = HOLDER_PAIRS, anchors: int = 5, seed: int = 0) -> HolderCertificate:
    """Oscillation decay over ``Q_nu = B(x, k/4^nu) x (t - (k/4^nu)^2, t + (k/4^nu)^2)``.

    ``theta`` is the largest ratio ``omega_{nu+1}/omega_nu``, ``alpha_fit`` the
    slope of ``log omega_nu`` against ``log(k/4^nu)``, ``alpha_pred = -log
    theta / log 4``.  The Hölder quotient ``|u(p) - u(q)| / d(p, q)^alpha`` is
    maximised over ``pairs`` random pairs inside ``Q_0`` at ``alpha =
    min(alpha_fit, alpha_pred, 1)``; pairs are drawn around ``anchors``
    random nodes so that each needs only one distance field.
    """
    if levels < 3:
        raise ConfigurationError("need at least 3 dyadic levels")
    if t_center - k * k < u.times[0] - 1e-12 or t_center + k * k > u.times[-1] + 1e-12:
        raise GeometryError("time window of the k-neighbourhood leaves the solution's time range")
    df0 = distances.get(center, k)
    scales = [k / 4.0 ** nu for nu in range(levels)]
    omegas = []
    for rho in scales:
        vals = _neighbourhood(u, df0, rho, t_center)
        omegas.append(float(vals.max() - vals.min()))
    res = resolution_of(u)
    om = np.asarray(omegas)
    if np.count_nonzero(om > 1e-14 * max(1.0, float(np.abs(u.values).max()))) < 2:
        return HolderCertificate(scales, omegas, 0.0, float("nan"), float("nan"), float("nan"),
                                 0.0, 0, trivial=True, resolution=res)
    theta = float(np.max(om[1:] / om[:-1]))
    slope = float(np.polyfit(np.log(scales), np.log(np.maximum(om, 1e-300)), 1)[0])
    alpha_pred = alpha_from_theta(theta) if 0 < theta < 1 else float("nan")
    alpha = min(slope, alpha_pred, 1.0) if np.isfinite(alpha_pred) else float("nan")
    quotient, npairs = float("nan"), 0
    if np.isfinite(alpha) and alpha > 0:
        quotient, npairs = _holder_quotient(u, distances, df0, center, t_center, k, alpha,
                                            pairs, anchors, seed)
    return HolderCertificate(scales, omegas, theta, slope, alpha_pred, alpha, quotient, npairs,
                             resolution=res)


def _holder_quotient(u, distances, df0, center, tc, k, alpha, pairs, anchors, seed):
    """Largest ``|u(p) - u(q)| / d(p, q)^alpha`` over sampled pairs inside ``Q_0``.

    Anchors and partners are drawn in physical coordinates and snapped to
    nodes, so the same seed samples the same pairs at every resolution.
    """
    rng = np.random.default_rng(seed)
    grid = u.grid
    half = 0.5 * k
    inner = np.flatnonzero((df0.values < half).ravel())
    V = u.values.reshape(u.nt, -1)
    tmask = u.time_mask(tc - half * half, tc + half * half)
    tidx = np.flatnonzero(tmask)
    per = int(math.ceil(pairs / anchors))
    best, count = 0.0, 0
    for _ in range(anchors):
        a = inner[rng.integers(inner.size)]
        apoint = grid.points[a]
        ta = int(tidx[rng.integers(tidx.size)])
        dfa = distances.get(apoint, half)
        reach = np.flatnonzero((dfa.values < half).ravel())
        for _ in range(per):
            b = reach[rng.integers(reach.size)]
            tb = int(tidx[rng.integers(tidx.size)])
            d = max(float(dfa.values.ravel()[b]), math.sqrt(abs(u.times[ta] - u.times[tb])))
            if d <= 0:
                continue
            best = max(best, abs(V[ta, a] - V[tb, b]) / d ** alpha)
            count += 1
    return float(best), count


# ---------------------------------------------------------------------------
# structural constants


def _sample_xi(rng, m, count, M):
    dirs = rng.standard_normal((m, count))
    dirs /= np.linalg.norm(dirs, axis=0)
    top = 1e3 if M is None else float(M)
    mags = np.exp(rng.uniform(math.log(1e-3 * top), math.log(top), count))
    # include the cap itself, where the lower bound is usually tightest
    mags[: max(1, count // 10)] = top
    return dirs * mags


def structural_check(flux: NonlinearFlux, samples: int = 2000, grid: Grid = None, points=None,
                     seed: int = 0, tol: float = 1e-9) -> CertificationReport:
    """Sample ``(x, xi)`` and test ``|A| <= C|xi|`` and ``lam|xi|^2 <= A.xi <= Lam|xi|^2``.

    Points are random nodes of ``grid``, the given ``points``, or uniform in
    ``[-1, 1]^m``.  The report carries the tightest empirical constants and,
    on failure, the first violating sample as witness.
    """
    rng = np.random.default_rng(seed)
    if points is None:
        if grid is not None:
            points = grid.points[rng.integers(grid.size, size=samples)]
        else:
            points = rng.uniform(-1, 1, (samples, flux.m))
    points = np.atleast_2d(np.asarray(points, float))
    if points.shape[0] != samples:
        points = points[rng.integers(points.shape[0], size=samples)]
    xi = _sample_xi(rng, flux.m, samples, flux.M)
    claimed = {"C": flux.C, "lam": flux.lam, "Lam": flux.Lam, "M": flux.M}
    A = np.asarray(flux(points, xi), float)
    n2 = np.sum(xi * xi, axis=0)
    q = np.sum(A * xi, axis=0) / n2
    emp = {"C": float(np.max(np.sqrt(np.sum(A * A, axis=0) / n2))),
           "lam": float(np.min(q)), "Lam": float(np.max(q))}
    witness = None
    try:
        flux.check_zero(points[:1])
        flux.check(points, xi, tol)
    except StructuralViolation as exc:
        witness = exc.witness
    passed = witness is None
    return CertificationReport(
        "structural", passed, lhs=emp["lam"], rhs=flux.lam,
        constants={"C_claimed": flux.C, "lam_claimed": flux.lam, "Lam_claimed": flux.Lam,
                   "C_fit": emp["C"], "lam_fit": emp["lam"], "Lam_fit": emp["Lam"]},
        margin=float(min(emp["lam"] / flux.lam - 1, 1 - emp["Lam"] / flux.Lam, 1 - emp["C"] / flux.C)),
        details={"flux": flux.name, "samples": samples, "claimed": claimed, "empirical": emp,
                 "witness": witness})
