"""Moser iteration, the gamma constant, the BMO-with-lag bridge and log-u estimates."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, DomainError, GeometryError
from .functionals import resolution_of
from .geometry import CCDistanceField, DistanceCache, LagMapping, ParabolicRectangle
from .grid import GridFunction
from .report import CertificationReport

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule


@dataclass
class IterationSchedule:
    """``p_nu = p0 k^nu``, ``r_nu = r (1 + r' nu)/(1 + r nu)``, ``tau_nu = tau (1 + tau' nu)/(1 + tau nu)``."""

    p0: float
    n: int
    r: float
    r_inner: float
    tau: float
    tau_inner: float
    nu_max: int
    center: tuple = (0.0, 0.0)
    t0: float = 0.0

    @property
    def k(self):
        return 1.0 + 2.0 / self.n

    @property
    def nus(self):
        return np.arange(self.nu_max + 1)

    @property
    def p(self):
        return self.p0 * self.k ** self.nus

    @property
    def radii(self):
        nu = self.nus
        return self.r * (1 + self.r_inner * nu) / (1 + self.r * nu)

    @property
    def durations(self):
        nu = self.nus
        return self.tau * (1 + self.tau_inner * nu) / (1 + self.tau * nu)

    def rectangle(self, nu):
        """``R_nu = B(r_nu) x (t0, t0 + tau_nu)``."""
        return ParabolicRectangle(self.center, float(self.radii[nu]), self.t0,
                                  self.t0 + float(self.durations[nu]), "R_nu")

    def limit_rectangle(self):
        """``R' = B(r') x (t0, t0 + tau')``."""
        return ParabolicRectangle(self.center, self.r_inner, self.t0, self.t0 + self.tau_inner, "R'")

    def table(self):
        return [{"nu": int(v), "p": float(p), "r": float(r), "tau": float(t)}
                for v, p, r, t in zip(self.nus, self.p, self.radii, self.durations)]


def make_schedule(p0: float, n: int, r: float, r_inner: float, tau: float, tau_inner: float,
                  nu_max: int, center=None, t0: float = 0.0) -> IterationSchedule:
    if p0 == 0:
        raise ConfigurationError("p0 must be nonzero")
    if not 0 < r_inner < r:
        raise ConfigurationError(f"need 0 < r' < r, got r'={r_inner}, r={r}")
    if not 0 < tau_inner < tau:
        raise ConfigurationError(f"need 0 < tau' < tau, got tau'={tau_inner}, tau={tau}")
    if int(nu_max) < 1:
        raise ConfigurationError("nu_max must be at least 1")
    if int(n) < 1:
        raise ConfigurationError("n must be a positive integer")
    center = tuple([0.0] * int(n)) if center is None else tuple(float(c) for c in center)
    return IterationSchedule(float(p0), int(n), float(r), float(r_inner), float(tau), float(tau_inner),
                             int(nu_max), center, float(t0))


# ---------------------------------------------------------------------------
# gamma


@dataclass
class GammaConstant:
    value: float
    variant: str
    inputs: dict

    def to_dict(self):
        return {"value": self.value, "variant": self.variant, "inputs": self.inputs}


GAMMA_KEYS = ("C_S", "C_B", "C_HG", "lam", "r", "r_inner", "tau", "tau_inner", "Q", "n", "ball_volume")


def eval_gamma(inputs: dict, variant: str = "linear") -> GammaConstant:
    """Closed-form iteration constant.

    With ``K = C_HG^2/(r-r')^2 + 1/(tau-tau')`` and ``k = 1 + 2/n``:

    linear:
        ``2 C_S C_B^2 (r/r')^(Q+Q/k) |B_r|^(2/n) [8 lam^2 (tau/tau') K + 1/r^2] (8 lam K)^(2/n)``
    nonlinear (structural constants ``C`` and ``lam``):
        ``4 C_S C_B (r/r')^Q [(lam - C^2/2)^-1 (tau/tau') K + 1/(2 r^2)] (8 |B_r| K)^(2/n)``
    """
    keys = GAMMA_KEYS + (("C",) if variant == "nonlinear" else ())
    missing = [k for k in keys if k not in inputs]
    if missing:
        raise ConfigurationError(f"missing gamma inputs: {missing}")
    vals = {k: float(inputs[k]) for k in keys}
    bad = [k for k, v in vals.items() if not (v > 0 and np.isfinite(v))]
    if bad:
        raise ConfigurationError(f"gamma inputs must be positive and finite: {bad}")
    r, rp, tau, taup = vals["r"], vals["r_inner"], vals["tau"], vals["tau_inner"]
    if not (rp < r and taup < tau):
        raise ConfigurationError("need r' < r and tau' < tau")
    n, Q = vals["n"], vals["Q"]
    k = 1 + 2 / n
    K = vals["C_HG"] ** 2 / (r - rp) ** 2 + 1 / (tau - taup)
    lam = vals["lam"]
    if variant == "linear":
        value = (2 * vals["C_S"] * vals["C_B"] ** 2 * (r / rp) ** (Q + Q / k) * vals["ball_volume"] ** (2 / n)
                 * (8 * lam ** 2 * (tau / taup) * K + 1 / r ** 2) * (8 * lam * K) ** (2 / n))
    elif variant == "nonlinear":
        gap = lam - vals["C"] ** 2 / 2
        if gap <= 0:
            raise ConfigurationError("nonlinear gamma needs lam > C^2/2")
        value = (4 * vals["C_S"] * vals["C_B"] * (r / rp) ** Q
                 * ((tau / taup) * K / gap + 1 / (2 * r ** 2)) * (8 * vals["ball_volume"] * K) ** (2 / n))
    else:
        raise ConfigurationError(f"unknown gamma variant {variant!r}")
    return GammaConstant(float(value), variant, vals)


# ---------------------------------------------------------------------------
# iteration chain


@dataclass
class ChainReport:
    schedule: IterationSchedule
    log_H: np.ndarray            # log of mean u^{p_nu} over R_nu
    power_means: np.ndarray      # H_nu^{1/p_nu}
    log_ratios: np.ndarray       # log(H_{nu+1} / H_nu^k)
    gamma_fit: float
    extremum: float              # max (p0 > 0) or min (p0 < 0) of u over R'
    oscillation: float           # max - min of u over R_0
    completed: int               # number of finite levels
    partial: bool
    gamma: float = None
    details: dict = field(default_factory=dict)

    @property
    def ratios(self):
        return np.exp(self.log_ratios)

    @property
    def gap(self):
        return float(abs(self.power_means[self.completed - 1] - self.extremum))

    def table(self):
        rows = self.schedule.table()[: self.completed]
        for i, row in enumerate(rows):
            row["log_H"] = float(self.log_H[i])
            row["power_mean"] = float(self.power_means[i])
            row["ratio"] = float(np.exp(self.log_ratios[i - 1])) if i else None
        return rows

    def to_report(self, tol=0.05) -> CertificationReport:
        pm = self.power_means[: self.completed]
        mono = np.diff(pm) * np.sign(self.schedule.p0)
        monotone = bool(np.all(mono >= -1e-12 * np.abs(pm[1:])))
        gap_ok = self.gap <= tol * self.oscillation + 1e-12 * abs(self.extremum)
        gamma_ok = self.gamma is None or bool(np.all(self.ratios <= self.gamma))
        bound_ok = bool(np.all(pm <= self.extremum * (1 + 1e-12))) if self.schedule.p0 > 0 else \
            bool(np.all(pm >= self.extremum * (1 - 1e-12)))
        return CertificationReport(
            f"moser[p0={self.schedule.p0:g}]", bool(monotone and gap_ok and gamma_ok),
            lhs=float(self.gamma_fit), rhs=float(self.gamma) if self.gamma is not None else float("nan"),
            constants={"gamma_fit": self.gamma_fit, "gamma": self.gamma},
            margin=float(1 - self.gap / self.oscillation) if self.oscillation > 0 else 1.0,
            resolution=self.details.get("resolution", {}),
            details={"monotone": monotone, "gap": self.gap, "gap_ok": bool(gap_ok), "ratios_within_gamma": gamma_ok,
                     "power_means_bounded_by_extremum": bound_ok, "extremum": self.extremum,
                     "oscillation": self.oscillation, "partial": self.partial, "table": self.table()})


def run_iteration(u: GridFunction, schedule: IterationSchedule, distfield: CCDistanceField,
                  gamma: float = None) -> ChainReport:
    """Evaluate ``H_nu = mean_{R_nu} u^{p_nu}`` in log space along the schedule.

    ``gamma_fit`` is the largest ``H_{nu+1} / H_nu^k``.  Levels whose logarithm
    is not finite end the chain and the report is marked partial.
    """
    if np.any(u.values <= 0):
        raise DomainError("the iteration needs a positive field")
    if distfield.horizon < schedule.r:
        raise GeometryError("distance horizon smaller than the schedule radius")
    logu = np.log(u.values.reshape(u.nt, -1))
    k = schedule.k
    log_H, means = [], []
    partial = False
    for nu in range(schedule.nu_max + 1):
        R = schedule.rectangle(nu)
        vals = logu[R.time_mask(u)][:, R.spatial_mask(distfield).ravel()]
        if vals.size == 0:
            raise GeometryError(f"R_{nu} contains no grid node")
        p = schedule.p[nu]
        with np.errstate(over="ignore", invalid="ignore"):
            lh = float(logsumexp(p * vals) - math.log(vals.size))
            pm = math.exp(lh / p) if np.isfinite(lh) else math.nan
        if not (np.isfinite(lh) and np.isfinite(pm)):
            partial = True
            log.warning("iteration stopped at nu=%d: non-finite value", nu)
            break
        log_H.append(lh)
        means.append(pm)
    log_H = np.array(log_H)
    lr = log_H[1:] - k * log_H[:-1]
    Rp = schedule.limit_rectangle()
    inner = u.values.reshape(u.nt, -1)[Rp.time_mask(u)][:, Rp.spatial_mask(distfield).ravel()]
    R0 = schedule.rectangle(0)
    outer = u.values.reshape(u.nt, -1)[R0.time_mask(u)][:, R0.spatial_mask(distfield).ravel()]
    ext = float(inner.max() if schedule.p0 > 0 else inner.min())
    return ChainReport(schedule, log_H, np.array(means), lr,
                       float(np.exp(lr.max())) if lr.size else 1.0, ext,
                       float(outer.max() - outer.min()), len(log_H), partial, gamma,
                       {"resolution": resolution_of(u)})


# ---------------------------------------------------------------------------
# bridge


def bridge_nu(n: int, eps: float) -> int:
    """Smallest ``nu`` with ``(1/k^nu)(k+1)/2 < eps``, ``k = 1 + 2/n``."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    k = 1.0 + 2.0 / n
    nu = 0
    while (k + 1) / 2 / k ** nu >= eps:
        nu += 1
    return nu


@dataclass
class BridgeRecord:
    center: tuple
    r: float
    t: float
    C: float
    forward_bmo: float
    backward_bmo: float
    m_minus: float      # mean of (u/u0)^-eps over R, u0 a sample of u on R
    m_plus: float       # mean of (u/u0)^eps over S(R)
    product: float

    def to_dict(self):
        return dict(self.__dict__, center=list(self.center))


@dataclass
class BMOWithLagReport:
    eps: float
    eta: float
    records: list
    skipped: list
    N: float
    product_max: float
    nu_required: int

    def to_report(self, name="bridge") -> CertificationReport:
        finite = bool(np.isfinite(self.product_max) and np.isfinite(self.N))
        return CertificationReport(
            name, finite and bool(self.records), lhs=self.product_max, rhs=float("nan"),
            constants={"bridge_C": self.product_max, "N_f": self.N, "eps": self.eps, "eta": self.eta,
                       "nu_required": self.nu_required},
            margin=0.0, details={"records": [r.to_dict() for r in self.records], "skipped": self.skipped})


def _rect_values(u, distfield, center, r, t0, t1):
    rect = ParabolicRectangle(center, r, t0, t1, "lagged")
    m = rect.time_mask(u)
    return u.values.reshape(u.nt, -1)[m][:, rect.spatial_mask(distfield).ravel()], rect


def bridge_statistic(u: GridFunction, eps: float, family, distances: DistanceCache,
                     lag: LagMapping = None, n: int = None) -> BMOWithLagReport:
    """Aimar's product ``m_R(u^-eps) m_{S(R)}(u^eps)`` over a rectangle family.

    ``family`` holds ``(center, r, t)`` with ``R = B(center, r) x (t - r, t + r)``
    and ``S(R)`` the same ball around the lagged time ``t - 2 r^2 / eta^2``.
    ``C(x, r)`` for ``f = -log u`` is the ball mean of ``f`` at ``t - r``.
    Rectangles whose lag leaves the time range are skipped with a warning.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    if np.any(u.values <= 0):
        raise DomainError("bridge statistic needs a positive field")
    lag = lag or LagMapping(0.5, float(u.times[0]))
    n = n or u.grid.ndim
    records, skipped = [], []
    T0, T1 = float(u.times[0]), float(u.times[-1])
    for center, r, t in family:
        center = tuple(float(c) for c in center)
        (_, ts), _ = LagMapping(lag.eta).S((center, t), r)
        if t - r < T0 - 1e-12 or t + r > T1 + 1e-12 or ts - r < T0 - 1e-12:
            msg = f"rectangle at {center}, r={r}, t={t} skipped: lag leaves the time range"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            skipped.append({"center": list(center), "r": r, "t": t})
            continue
        df = distances.get(center, r)
        vals, rect = _rect_values(u, df, center, r, t - r, t + r)
        lagged, _ = _rect_values(u, df, center, r, ts - r, ts + r)
        f = -np.log(vals)
        ball = rect.spatial_mask(df).ravel()
        k1 = u.time_index(t - r)
        C = float(-np.log(u.values.reshape(u.nt, -1)[k1, ball]).mean())
        fl = -np.log(lagged)
        fwd = float(np.mean(np.sqrt(np.maximum(f - C, 0.0))))
        bwd = float(np.mean(np.sqrt(np.maximum(C - fl, 0.0))))
        # the product is invariant under u -> c u; normalising by a sample keeps constants exact
        ref = vals.flat[0]
        m_minus = float(np.mean((vals / ref) ** (-eps)))
        m_plus = float(np.mean((lagged / ref) ** eps))
        records.append(BridgeRecord(center, float(r), float(t), C, fwd, bwd, m_minus, m_plus, m_minus * m_plus))
    if not records:
        raise GeometryError("every rectangle of the family was skipped")
    N = max(max(r.forward_bmo, r.backward_bmo) for r in records)
    pmax = max(r.product for r in records)
    return BMOWithLagReport(eps, lag.eta, records, skipped, N, pmax, bridge_nu(n, eps))


# ---------------------------------------------------------------------------
# log-u estimates


def log_level_set_check(u: GridFunction, distfield: CCDistanceField, r: float, t0: float,
                        lam: float, n_levels: int = 8) -> CertificationReport:
    """Level-set and BMO estimates for ``v = -log u``.

    ``m = 2 lam / r^2``, ``t1 = t0 - r^2``, ``C = V_B(t1)`` and
    ``w = v - C - m (t - t1)``.  Forward: ``mu{w > s}`` on
    ``R~ = B x (t0 - r^2, t0 + r^2)``; backward: ``mu{w < -s}`` on
    ``R^ = B x (t0 - 3 r^2, t0 - r^2)``, for ``n_levels`` log-spaced
    ``s`` strictly inside ``(3 m r^2, 50 m r^2)``.  The fitted constants are
    ``c3 = max_s mu r^2 s``.  Also reports the averages of ``sqrt((v - V_B)^+)``
    over ``R~`` and ``sqrt((V_B - v)^+)`` over ``R^``.
    """
    if np.any(u.values <= 0):
        raise DomainError("log estimates need u bounded away from zero")
    grid = distfield.grid
    ball = (distfield.values < r).ravel()
    if not ball.any():
        raise GeometryError("ball contains no grid node")
    if r > distfield.horizon:
        raise GeometryError("radius exceeds the distance horizon")
    t1 = t0 - r * r
    if t0 - 3 * r * r < u.times[0] - 1e-12 or t0 + r * r > u.times[-1] + 1e-12:
        raise GeometryError("log estimate rectangles leave the time range")
    m = 2.0 * lam / (r * r)
    V = -np.log(u.values.reshape(u.nt, -1)[:, ball])
    C = float(V[u.time_index(t1)].mean())
    W = V - C - m * (u.times[:, None] - t1)
    fwd = u.time_mask(t0 - r * r, t0 + r * r)
    bwd = u.time_mask(t0 - 3 * r * r, t0 - r * r)
    s_ladder = np.geomspace(3 * m * r * r, 50 * m * r * r, n_levels + 2)[1:-1]
    cell = grid.cell_volume * (u.dt if u.nt > 1 else 1.0)
    mu_f = np.array([np.count_nonzero(W[fwd] > s) for s in s_ladder]) * cell
    mu_b = np.array([np.count_nonzero(W[bwd] < -s) for s in s_ladder]) * cell
    c3_f = float(np.max(mu_f * r * r * s_ladder))
    c3_b = float(np.max(mu_b * r * r * s_ladder))
    bmo_f = float(np.mean(np.sqrt(np.maximum(V[fwd] - C, 0.0))))
    bmo_b = float(np.mean(np.sqrt(np.maximum(C - V[bwd], 0.0))))
    monotone = bool(np.all(np.diff(mu_f) <= 0) and np.all(np.diff(mu_b) <= 0))
    finite = all(np.isfinite(x) for x in (c3_f, c3_b, bmo_f, bmo_b))
    return CertificationReport(
        "log_level_sets", bool(finite and monotone), lhs=c3_f, rhs=c3_b,
        constants={"c3": c3_f, "c3_backward": c3_b, "c4": bmo_f, "c5": bmo_b, "m": m},
        margin=0.0, resolution=resolution_of(u),
        details={"s": s_ladder.tolist(), "mu_forward": mu_f.tolist(), "mu_backward": mu_b.tolist(),
                 "s_monotone": monotone, "C": C, "t0": t0, "r": r})
