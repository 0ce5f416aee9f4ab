"""Integral functionals and the energy, Sobolev and Poincaré checks.

All integrals use node-centred cells: a node belongs to ``B(x, r)`` when its
distance value is ``< r`` and every retained time level carries weight ``dt``.
The same convention is used on both sides of every inequality, so fitted
constants are consistent under refinement.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DomainError, GeometryError
from .frames import gradient_stack
from .geometry import CCDistanceField, CutoffFunction, ParabolicRectangle, make_cutoff
from .grid import GridFunction
from .report import CertificationReport, margin_of
from .solver import CoefficientMatrix, NonlinearFlux, _linear_flux, time_derivative, trapezoid_weights

log = logging.getLogger(__name__)

REGIMES = ("solution", "subsolution", "supersolution")


def resolution_of(u: GridFunction):
    return {"shape": list(u.grid.shape), "spacing": [float(h) for h in u.grid.spacing],
            "dt": None if u.nt < 2 else float(u.dt), "levels": int(u.nt)}


def _masks(u: GridFunction, rect: ParabolicRectangle, distfield: CCDistanceField):
    ball = rect.spatial_mask(distfield).ravel()
    if not ball.any():
        raise GeometryError(f"ball of radius {rect.r} contains no grid node")
    levels = rect.time_mask(u)
    return ball, levels


def _dt(u):
    return 1.0 if u.nt < 2 else float(u.dt)


def horizontal_gradient_sq(u: GridFunction, frame):
    """``|grad_0 u|^2`` per level, shape ``(nt, size)``."""
    g = gradient_stack(frame, u.grid, u.values.reshape(u.nt, -1))
    return np.sum(g * g, axis=0)


# ---------------------------------------------------------------------------
# H, M, D and power means


@dataclass
class MoserFunctionals:
    H: float
    M: float
    D: float
    rect: ParabolicRectangle

    def to_dict(self):
        return {"H": self.H, "M": self.M, "D": self.D, "rect": self.rect.to_dict()}


def compute_HMD(v: GridFunction, rect: ParabolicRectangle, distfield: CCDistanceField) -> MoserFunctionals:
    """``H`` = mean of ``v^2`` on the rectangle, ``M`` = max over levels of the ball mean of ``v^2``,
    ``D`` = mean of ``|grad_0 v|^2`` on the rectangle."""
    ball, levels = _masks(v, rect, distfield)
    V = v.values.reshape(v.nt, -1)[levels][:, ball]
    G = horizontal_gradient_sq(v, distfield.frame)[levels][:, ball]
    slice_means = np.mean(V * V, axis=1)
    return MoserFunctionals(float(slice_means.mean()), float(slice_means.max()), float(G.mean()), rect)


@dataclass
class PNormReport:
    p: float
    value: float
    rect: ParabolicRectangle

    def to_dict(self):
        return {"p": self.p, "value": self.value, "rect": self.rect.to_dict()}


def _power_mean(vals, p):
    if p == math.inf:
        return float(vals.max())
    if p == -math.inf:
        return float(vals.min())
    if p == 0:
        raise ConfigurationError("p must be nonzero")
    integer = float(p).is_integer()
    if np.any(vals <= 0) and (p < 0 or not integer):
        raise DomainError(f"power mean with p={p} needs positive values (min {vals.min():.3e})")
    if np.all(vals > 0):
        z = p * np.log(vals)
        zmax = z.max()
        return float(np.exp((zmax + np.log(np.mean(np.exp(z - zmax)))) / p))
    m = np.mean(vals ** p)
    return float(np.sign(m) * abs(m) ** (1.0 / p)) if p % 2 else float(m ** (1.0 / p))


def p_norm(u: GridFunction, p: float, rect: ParabolicRectangle, distfield: CCDistanceField) -> PNormReport:
    """``M(p, D) = (|D|^-1 iint_D u^p)^(1/p)``; ``p = +-inf`` gives the max/min on ``D``."""
    ball, levels = _masks(u, rect, distfield)
    vals = u.values.reshape(u.nt, -1)[levels][:, ball]
    return PNormReport(float(p), _power_mean(vals, float(p)), rect)


def power_transform(u: GridFunction, p: float, regime: str = "solution") -> GridFunction:
    """Pointwise ``u^p``.  ``meta['regime']`` tracks whether the result is a sub- or supersolution.

    A convex function of a solution (``p >= 1`` or ``p < 0``) is a subsolution,
    a concave one (``0 < p < 1``) a supersolution.  ``p = 0`` returns ones.
    """
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}")
    vals = u.values
    if p == 0:
        log.info("power_transform with p=0 returns the constant 1")
        out = u.with_values(np.ones_like(vals), positive=True)
        out.meta["regime"] = "solution"
        return out
    if np.any(vals <= 0) and (p < 0 or not float(p).is_integer()):
        raise DomainError(f"u^p with p={p} needs positive u (min {vals.min():.3e})")
    out = u.with_values(vals ** p, positive=bool(np.all(vals > 0)))
    out.meta["regime"] = _power_regime(p, regime)
    return out


def _power_regime(p, regime):
    convex = p >= 1 or p < 0
    if p == 1:
        return regime
    if regime == "solution":
        return "subsolution" if convex else "supersolution"
    if regime == "subsolution" and p >= 1:
        return "subsolution"
    if regime == "supersolution" and p < 0:
        return "subsolution"
    if regime == "supersolution" and 0 < p < 1:
        return "supersolution"
    return "unknown"


# ---------------------------------------------------------------------------
# Cacciopoli


def predicted_cacciopoli_constants(flux, C_HG, r_inner, r, tau_inner, tau, p=1.0):
    """Constants from the energy estimate.

    Linear coefficients with ellipticity ``lam``:
    ``C1 = 8 lam^2 K``, ``C2 = 8 lam K`` with ``K = C_HG^2/(r-r')^2 + 1/(tau-tau')``.
    Structural flux ``(C, lam, Lam)``: ``C1 = 2 K / (lam - C^2/2)`` (``inf`` when
    ``lam <= C^2/2``) and ``C2 = 8 K``.  For ``1/2 < p < 1`` both are multiplied
    by ``p^2/(2p-1)``.
    """
    K = C_HG ** 2 / (r - r_inner) ** 2 + 1.0 / (tau - tau_inner)
    if isinstance(flux, CoefficientMatrix):
        C1, C2 = 8 * flux.lam ** 2 * K, 8 * flux.lam * K
    else:
        gap = flux.lam - flux.C ** 2 / 2
        C1 = 2 * K / gap if gap > 0 else math.inf
        C2 = 8 * K
    if 0.5 < p < 1:
        f = p * p / (2 * p - 1)
        C1, C2 = C1 * f, C2 * f
    return float(C1), float(C2), float(K)


def _check_regime(p, regime):
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}")
    if p == 0 or 0 < p <= 0.5:
        raise ConfigurationError(f"p={p} is outside the supported ranges p > 1/2 and p < 0")
    if p >= 1 and regime == "supersolution":
        raise ConfigurationError(f"p={p} needs a subsolution or solution, got a strict supersolution")
    if p < 1 and regime == "subsolution":
        raise ConfigurationError(f"p={p} needs a supersolution or solution, got a strict subsolution")


def time_reversed(u: GridFunction) -> GridFunction:
    """``u(x, T0 + T1 - t)`` on the same time levels."""
    T = u.times[0] + u.times[-1]
    out = GridFunction(u.grid, u.values[::-1].copy(), T - u.times[::-1], u.positive)
    out.meta["time_reversed"] = True
    return out


def _flux_at(flux, grid, t, xi):
    if isinstance(flux, CoefficientMatrix):
        return _linear_flux(flux.evaluate(grid, t), xi)
    return np.asarray(flux(grid.points, xi), float)


def power_direction_check(u: GridFunction, p: float, cutoff: CutoffFunction, frame, flux):
    """Weak-form sign of ``v = u^p`` against ``phi = psi >= 0``.

    With the chain-rule flux ``p u^(p-1) A(x, grad_0 u)``,
    ``iint phi v_t + sum_j X_j phi p u^(p-1) A_j = -p(p-1) iint phi u^(p-2) A.grad_0 u``,
    which is ``<= 0`` for ``p >= 1`` or ``p < 0`` (``v`` is a subsolution) and
    ``>= 0`` for ``0 < p < 1``.  The tolerance is the discrete residual of
    ``u`` itself against ``p u^(p-1) phi``, i.e. the scheme's truncation error.
    """
    grid = u.grid
    U = u.values.reshape(u.nt, -1)
    Phi = cutoff.values(u.times).reshape(u.nt, -1)
    w = trapezoid_weights(u.times) * grid.cell_volume
    V = U ** p
    vt = time_derivative(u.with_values(V.reshape(u.values.shape), positive=True)).reshape(u.nt, -1)
    ut = time_derivative(u).reshape(u.nt, -1)
    gu = gradient_stack(frame, grid, U)
    gphi = gradient_stack(frame, grid, Phi)
    weight = p * U ** (p - 1) * Phi
    gw = gradient_stack(frame, grid, weight)
    R = pred = trunc = 0.0
    for k in range(u.nt):
        if w[k] == 0:
            continue
        A = _flux_at(flux, grid, u.times[k], gu[:, k])
        R += w[k] * (np.dot(Phi[k], vt[k]) + np.sum(gphi[:, k] * A * (p * U[k] ** (p - 1))))
        pred += w[k] * (-p * (p - 1) * np.sum(Phi[k] * U[k] ** (p - 2) * np.sum(A * gu[:, k], axis=0)))
        trunc += w[k] * (np.dot(weight[k], ut[k]) + np.sum(A * gw[:, k]))
    sign = -1.0 if (p >= 1 or p < 0) else 1.0
    tol = 2.0 * abs(trunc) + 1e-12 * max(1.0, abs(pred))
    return {"residual": float(R), "predicted": float(pred), "expected_sign": sign,
            "tolerance": float(tol), "holds": bool(sign * R >= -tol)}


def check_cacciopoli(u: GridFunction, p: float, Rp: ParabolicRectangle, R: ParabolicRectangle,
                     distfield: CCDistanceField, flux, regime: str = "solution", tol: float = 0.0,
                     cutoff: CutoffFunction = None) -> CertificationReport:
    """Energy estimate for ``v = u^p`` on ``R' subset R``.

    Checks ``iint_{R'} |grad_0 v|^2 <= C1 iint_R v^2`` and
    ``max_t int_{B(r')} v^2 <= C2 iint_R v^2`` with the predicted constants,
    where ``R = B(r) x (t0, t0+tau)`` and ``R' = B(r') x (t0+tau', t0+tau)``.
    For ``1/2 < p < 1`` the field is reversed in time first.  The report also
    contains the weak-form direction check of :func:`power_direction_check`
    and, for ``p < 0``, the literal reversed comparison ``LHS >= C RHS``.
    """
    _check_regime(p, regime)
    if np.any(u.values <= 0):
        raise DomainError("energy estimates need a positive field")
    r_inner, r = Rp.r, R.r
    t0, tau = R.t0, R.duration
    tau_inner = Rp.t0 - R.t0
    if not (np.isclose(Rp.t1, R.t1) and 0 < tau_inner < tau and 0 < r_inner < r):
        raise ConfigurationError("expected R' = B(r') x (t0+tau', t0+tau) inside R = B(r) x (t0, t0+tau)")
    frame = distfield.frame
    reversed_time = 0.5 < p < 1
    if cutoff is None:
        cutoff = make_cutoff(distfield, r_inner, r, tau_inner, tau, t0)
    direction = power_direction_check(u, p, cutoff, frame, flux)
    w = time_reversed(u) if reversed_time else u
    if reversed_time:
        T = u.times[0] + u.times[-1]
        t0 = T - R.t1
        R = R.with_(t0=t0, t1=t0 + tau)
        Rp = Rp.with_(t0=t0 + tau_inner, t1=t0 + tau)
        cutoff = replace(cutoff, t0=t0)
    v = power_transform(w, p)
    dV = distfield.grid.cell_volume * _dt(w)
    ball_R, lev_R = _masks(v, R, distfield)
    ball_Rp, lev_Rp = _masks(v, Rp, distfield)
    V2 = v.values.reshape(v.nt, -1) ** 2
    G2 = horizontal_gradient_sq(v, frame)
    rhs = float(V2[lev_R][:, ball_R].sum() * dV)
    lhs1 = float(G2[lev_Rp][:, ball_Rp].sum() * dV)
    lhs2 = float(V2[lev_Rp][:, ball_Rp].sum(axis=1).max() * distfield.grid.cell_volume)
    C1, C2, K = predicted_cacciopoli_constants(flux, cutoff.C_HG, r_inner, r, tau_inner, tau, p)
    ok1 = lhs1 <= C1 * rhs * (1 + tol)
    ok2 = lhs2 <= C2 * rhs * (1 + tol)
    details = {
        "p": p, "regime": regime, "power_regime": v.meta.get("regime"), "time_reversed": reversed_time,
        "gradient": {"lhs": lhs1, "rhs": rhs, "C1": C1, "fitted": lhs1 / rhs if rhs else math.inf,
                     "holds": bool(ok1)},
        "max_in_time": {"lhs": lhs2, "rhs": rhs, "C2": C2, "fitted": lhs2 / rhs if rhs else math.inf,
                        "holds": bool(ok2)},
        "direction_check": direction,
        "C_HG": cutoff.C_HG, "K": K,
        "R": R.to_dict(), "R_prime": Rp.to_dict(),
    }
    if p < 0:
        details["literal_reversed"] = {"gradient_holds": bool(lhs1 >= C1 * rhs),
                                       "max_in_time_holds": bool(lhs2 >= C2 * rhs)}
    passed = bool(ok1 and ok2 and direction["holds"])
    return CertificationReport(
        name=f"cacciopoli[p={p:g}]", passed=passed, lhs=lhs1, rhs=rhs,
        constants={"C1": C1, "C2": C2, "C1_fitted": details["gradient"]["fitted"],
                   "C2_fitted": details["max_in_time"]["fitted"], "C_HG": cutoff.C_HG},
        margin=min(margin_of(lhs1, rhs, C1, tol), margin_of(lhs2, rhs, C2, tol)),
        resolution=resolution_of(u), details=details)


# ---------------------------------------------------------------------------
# Sobolev and Poincaré


def check_sobolev(v, r_inner: float, r: float, distfield: CCDistanceField, C_B: float, Q: float,
                  k: float = None, cutoff: CutoffFunction = None) -> CertificationReport:
    """Non-compact Sobolev form on one time slice.

    ``(|B_r'|^-1 int_{B_r'} |v|^{2k})^{1/k} <= 2 C_S C_B (r/r')^{Q/k} |B_r|^-1 int_{B_r} (|grad_0 v|^2 + C_HG^2 v^2/(r-r')^2)``.
    The report's fitted constant is the smallest admissible ``C_S``.
    """
    grid = distfield.grid
    vals = np.asarray(v.values[-1] if isinstance(v, GridFunction) else v, float)
    if vals.shape != grid.shape:
        raise ConfigurationError("v must be a single slice on the distance field's grid")
    n = distfield.frame.n
    k = 1.0 + 2.0 / n if k is None else float(k)
    if not 1 < k <= 2:
        raise ConfigurationError("k must lie in (1, 2]")
    if cutoff is None:
        cutoff = make_cutoff(distfield, r_inner, r, 0.5, 1.0)
    inner = (distfield.values < r_inner).ravel()
    outer = (distfield.values < r).ravel()
    if not inner.any():
        raise GeometryError("inner ball contains no grid node")
    f = vals.ravel()
    g2 = horizontal_gradient_sq(GridFunction(grid, vals), distfield.frame)[0]
    lhs = float(np.mean(np.abs(f[inner]) ** (2 * k)) ** (1.0 / k))
    base = float(np.mean(g2[outer] + cutoff.C_HG ** 2 * f[outer] ** 2 / (r - r_inner) ** 2))
    geom = 2.0 * C_B * (r / r_inner) ** (Q / k)
    rhs = geom * base
    if lhs == 0 and rhs == 0:
        return CertificationReport("sobolev", True, 0.0, 0.0, {"C_S": None, "k": k}, 1.0,
                                   {"shape": list(grid.shape)}, {"trivial": True})
    C_S = lhs / rhs if rhs > 0 else math.inf
    return CertificationReport(
        "sobolev", bool(np.isfinite(C_S)), lhs, rhs,
        {"C_S": C_S, "k": k, "C_B": C_B, "Q": Q, "C_HG": cutoff.C_HG}, 0.0 if np.isfinite(C_S) else -math.inf,
        {"shape": list(grid.shape), "spacing": grid.spacing.tolist()},
        {"r_inner": r_inner, "r": r, "geometric_factor": geom})


def poincare_quotient(vals, distfield: CCDistanceField, r: float):
    """``(int_B |v - V_B|^2, r^2 int_B |grad_0 v|^2)`` on ``B = B(origin, r)``."""
    grid = distfield.grid
    ball = (distfield.values < r).ravel()
    if not ball.any():
        raise GeometryError("ball contains no grid node")
    f = np.asarray(vals, float).ravel()
    g2 = horizontal_gradient_sq(GridFunction(grid, f.reshape(grid.shape)), distfield.frame)[0]
    fb = f[ball]
    lhs = float(np.sum((fb - fb.mean()) ** 2) * grid.cell_volume)
    rhs = float(r * r * np.sum(g2[ball]) * grid.cell_volume)
    return lhs, rhs


def poincare_family(grid, center, r, count: int = 12, seed: int = 0):
    """Harmonics, bumps and smoothed random fields centred at ``center`` with scale ``r``."""
    rng = np.random.default_rng(seed)
    P = (grid.points - np.asarray(center)) / r
    n = grid.ndim
    fam = []
    for j in range(n):
        fam.append((f"linear{j}", P[:, j]))
        fam.append((f"harmonic{j}", np.sin(np.pi * P[:, j])))
    fam.append(("bump", np.exp(-2.0 * np.sum(P * P, axis=1))))
    from scipy.ndimage import gaussian_filter

    while len(fam) < count:
        noise = rng.standard_normal(grid.shape)
        sigma = [0.25 * r / h for h in grid.spacing]
        fam.append((f"random{len(fam)}", gaussian_filter(noise, sigma, mode="nearest").ravel()))
    return [(name, f.reshape(grid.shape)) for name, f in fam[:max(count, 2 * n + 1)]]


def check_poincare(v, distfield: CCDistanceField, r: float, family=None) -> CertificationReport:
    """Fitted ``C_P = int_B |v - V_B|^2 / (r^2 int_B |grad_0 v|^2)``.

    ``v`` may be a single field, a list of fields or ``None`` (then
    :func:`poincare_family` is used); the report carries the largest fitted
    constant.  Constant fields contribute nothing.
    """
    grid = distfield.grid
    if v is None:
        family = family or poincare_family(grid, distfield.origin_point, r)
    elif isinstance(v, (list, tuple)):
        family = [(f"f{i}", f) for i, f in enumerate(v)]
    else:
        vals = v.values[-1] if isinstance(v, GridFunction) else v
        family = [("v", vals)]
    fitted = {}
    worst = (0.0, 0.0)
    for name, f in family:
        lhs, rhs = poincare_quotient(f, distfield, r)
        if lhs <= 1e-14 * max(1.0, rhs):
            fitted[name] = 0.0
            continue
        c = lhs / rhs if rhs > 0 else math.inf
        if c > max(fitted.values(), default=0.0):
            worst = (lhs, rhs)
        fitted[name] = c
    C_P = max(fitted.values()) if fitted else 0.0
    return CertificationReport(
        "poincare", bool(np.isfinite(C_P)), worst[0], worst[1], {"C_P": C_P}, 0.0,
        {"shape": list(grid.shape), "spacing": grid.spacing.tolist()},
        {"r": r, "per_function": fitted, "center": distfield.origin_point.tolist()})
