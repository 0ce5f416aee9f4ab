"""Carnot–Carathéodory geometry on the lattice.

Distance fields
---------------
``d_cc(x0, .)`` is the minimal time needed to reach a point along curves
whose velocity is ``sum_i a_i(t) b_i`` with ``sum a_i^2 <= 1``.  For the
frames handled here every minimiser is a normal geodesic, i.e. the spatial
projection of a solution of the Hamiltonian system

    x' = sum_i (b_i . p) b_i,      p' = -sum_i (b_i . p) (Db_i)^T p,

started at ``x0`` with a covector on the unit cosphere ``sum_i (b_i . p)^2 = 1``.
:func:`cc_distance_field` shoots a tensor family of such geodesics, triangulates
the parameter domain (cosphere coordinates x time) and rasterises every image
simplex onto the lattice, keeping the smallest interpolated arrival time per
node.  Nodes that fall through the triangulation at folds of the exponential
map (the vertical axis of the Heisenberg group is the typical case) are
resolved by a Gauss–Newton solve of ``exp(q, t) = y`` started from nearby
samples.

Other content: ball volumes and doubling, cutoff functions, parabolic
rectangles and distances, and the lag maps ``T`` and ``S``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import _kernels
from .errors import ConfigurationError, DomainError, GeometryError
from .frames import VectorFieldFrame, horizontal_gradient
from .grid import Grid, GridFunction

SINH_STRETCH = 4.0


# ---------------------------------------------------------------------------
# distance fields


@dataclass
class CCDistanceField:
    """Values of ``d_cc(origin, .)`` on a grid (``+inf`` beyond the horizon)."""

    frame: VectorFieldFrame
    grid: Grid
    origin: tuple
    values: np.ndarray
    step: float
    horizon: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def origin_point(self):
        return self.grid.node_point(self.origin)

    def ball_mask(self, r):
        return self.values < r

    def at(self, point):
        return float(self.values[self.grid.nearest_node(point)])

    def finite_mask(self):
        return np.isfinite(self.values)


@dataclass
class _Sheet:
    """One connected piece of the unit cosphere, sampled on a tensor grid."""

    axes: list          # 1-D parameter arrays (sphere coordinates first, then vertical)
    sphere_dims: int    # 0, 1 or 2 angular coordinates
    sign: float         # orientation for one-dimensional horizontal spaces
    periodic: bool      # first axis is a full circle


class _Cosphere:
    def __init__(self, frame, x0):
        B0 = frame.coefficients(x0[None])[0]
        _, S, Vt = np.linalg.svd(B0, full_matrices=True)
        tol = 1e-9 * max(1.0, S.max(initial=0.0))
        self.rank = int(np.sum(S > tol))
        if self.rank == 0:
            raise GeometryError("all frame fields vanish at the origin node")
        self.S = S[: self.rank]
        self.Vr = Vt[: self.rank].T
        self.Vk = Vt[self.rank:].T
        self.n = frame.n
        self.vdim = self.n - self.rank
        kappa = 0.0
        if self.vdim:
            for i in range(frame.m):
                for j in range(i + 1, frame.m):
                    br = frame.bracket(i, j, x0[None])[0]
                    kappa = max(kappa, float(np.linalg.norm(self.Vk.T @ br)))
        self.kappa = kappa if kappa > 1e-8 else 1.0

    def covectors(self, sheet, q):
        """Initial covectors for parameter vectors ``q`` of shape ``(K, d)``."""
        q = np.atleast_2d(q)
        if sheet.sphere_dims == 0:
            u = np.full((q.shape[0], 1), sheet.sign)
        elif sheet.sphere_dims == 1:
            u = np.stack([np.cos(q[:, 0]), np.sin(q[:, 0])], axis=1)
        else:
            th, ph = q[:, 0], q[:, 1]
            u = np.stack([np.sin(ph) * np.cos(th), np.sin(ph) * np.sin(th), np.cos(ph)], axis=1)
        p = (u / self.S) @ self.Vr.T
        if self.vdim:
            p = p + q[:, sheet.sphere_dims:] @ self.Vk.T
        return p

    def sheets(self, n_angle, n_vertical, w_max):
        s = np.linspace(-1.0, 1.0, n_vertical)
        w = w_max * np.sinh(SINH_STRETCH * s) / np.sinh(SINH_STRETCH)
        vert = [w] * self.vdim
        if self.rank == 1:
            return [_Sheet(vert, 0, sg, False) for sg in (1.0, -1.0)]
        theta = 2 * np.pi * np.arange(n_angle) / n_angle
        if self.rank == 2:
            return [_Sheet([theta] + vert, 1, 1.0, True)]
        if self.rank == 3 and self.n == 3:
            phi = np.linspace(0.0, np.pi, n_angle // 2 + 1)
            return [_Sheet([theta, phi], 2, 1.0, True)]
        raise ConfigurationError("distance fields support ambient dimension 2 or 3 only")


def _hamiltonian_rhs(frame, X, P):
    B = frame.coefficients(X)
    J = frame.jacobian(X)
    h = np.einsum("kmn,kn->km", B, P)
    dx = np.einsum("km,kmn->kn", h, B)
    dp = -np.einsum("kab,ka->kb", np.einsum("km,kmab->kab", h, J), P)
    return dx, dp


def geodesic_flow(frame, x0, P0, dt, nsteps, record=True):
    """RK4 integration of normal geodesics from ``x0``.

    ``dt`` may be a scalar or one step per trajectory.  Returns positions of
    shape ``(nsteps + 1, K, n)`` when ``record`` is set, otherwise the final
    ``(X, P)``.
    """
    P = np.array(P0, float)
    X = np.broadcast_to(np.asarray(x0, float), P.shape).copy()
    h = np.asarray(dt, float)
    if h.ndim:
        h = h[:, None]
    out = np.empty((nsteps + 1,) + X.shape) if record else None
    if record:
        out[0] = X
    for s in range(nsteps):
        k1x, k1p = _hamiltonian_rhs(frame, X, P)
        k2x, k2p = _hamiltonian_rhs(frame, X + 0.5 * h * k1x, P + 0.5 * h * k1p)
        k3x, k3p = _hamiltonian_rhs(frame, X + 0.5 * h * k2x, P + 0.5 * h * k2p)
        k4x, k4p = _hamiltonian_rhs(frame, X + h * k3x, P + h * k3p)
        X = X + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        P = P + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if record:
            out[s + 1] = X
    return out if record else (X, P)


def cc_distance_field(frame: VectorFieldFrame, grid: Grid, origin, step: float = None,
                      horizon: float = None, angular_samples: int = None,
                      vertical_samples: int = None) -> CCDistanceField:
    """Distance field ``d_cc(origin, .)`` on ``grid``.

    Parameters
    ----------
    origin:
        Grid multi-index or a point (snapped to the nearest node).
    step:
        Arc-length step of the geodesic integration and of the time direction
        of the parameter mesh.  Defaults to half the largest lattice spacing
        and may not exceed it.
    horizon:
        Largest distance computed; nodes farther away get ``+inf``.
        Defaults to half the largest box extent.
    angular_samples, vertical_samples:
        Cosphere resolution.  By default consecutive geodesics end about one
        lattice spacing apart at the horizon.
    """
    if grid.ndim != frame.n:
        raise ConfigurationError("grid and frame dimensions differ")
    if grid.ndim not in (2, 3):
        raise ConfigurationError("distance fields support ambient dimension 2 or 3 only")
    if isinstance(origin, tuple) and all(isinstance(i, (int, np.integer)) for i in origin):
        idx = tuple(int(i) for i in origin)
        if any(i < 0 or i >= s for i, s in zip(idx, grid.shape)):
            raise DomainError(f"origin {idx} outside grid {grid.shape}")
    else:
        idx = grid.nearest_node(origin)
    x0 = grid.node_point(idx)
    hmax = float(grid.spacing.max())
    step = 0.5 * hmax if step is None else float(step)
    if not 0 < step <= hmax * (1 + 1e-12):
        raise ConfigurationError(f"step must lie in (0, {hmax:g}] (largest lattice spacing)")
    if horizon is None:
        horizon = 0.5 * float(max(h - l for l, h in zip(grid.lo, grid.hi)))
    nsteps = int(math.ceil(horizon / step - 1e-9))
    horizon_eff = nsteps * step
    if angular_samples is None:
        angular_samples = int(np.clip(math.ceil(np.pi * horizon_eff / step), 48, 720))
    if vertical_samples is None:
        vertical_samples = angular_samples
    vertical_samples += 1 - vertical_samples % 2

    cos = _Cosphere(frame, x0)
    w_max = np.pi / (2.0 * step * cos.kappa)
    sheets = cos.sheets(angular_samples, vertical_samples, w_max)
    tvals = step * np.arange(nsteps + 1)
    lo = np.asarray(grid.lo)
    sp_ = grid.spacing
    sh = np.asarray(grid.shape, dtype=np.int64)
    T = np.full(grid.size, np.inf)
    T[grid.flat_index(idx)] = 0.0

    samples = []
    for sheet in sheets:
        mesh = np.meshgrid(*sheet.axes, indexing="ij")
        pshape = mesh[0].shape
        q = np.stack([m.ravel() for m in mesh], axis=1)
        P0 = cos.covectors(sheet, q)
        traj = geodesic_flow(frame, x0, P0, step, nsteps)
        X = np.ascontiguousarray(np.moveaxis(traj, 0, 1).reshape(pshape + (nsteps + 1, grid.ndim)))
        if grid.ndim == 2:
            _kernels.raster2(X, tvals, T, lo, sp_, sh, sheet.periodic, _kernels.TRI2)
        else:
            _kernels.raster3(X, tvals, T, lo, sp_, sh, sheet.periodic, _kernels.KUHN3)
        samples.append((sheet, q, X.reshape(-1, nsteps + 1, grid.ndim)))

    T = T.reshape(grid.shape)
    fixed, remaining = _resolve_folds(frame, cos, x0, grid, T, samples, step, horizon_eff)
    T[T > horizon_eff] = np.inf
    diag = {
        "method": "geodesic-shooting",
        "cosphere_rank": cos.rank,
        "angular_samples": angular_samples,
        "vertical_samples": vertical_samples if cos.vdim else 0,
        "geodesics": int(sum(q.shape[0] for _, q, _ in samples)),
        "fold_nodes_resolved": fixed,
        "unresolved_nodes": remaining,
    }
    return CCDistanceField(frame, grid, idx, T, step, horizon_eff, diag)


def _hole_candidates(T, horizon, step):
    inner = np.where(np.isfinite(T) & (T < horizon - 2 * step), T, np.inf)
    near = ndimage.minimum_filter(inner, size=3, mode="constant", cval=np.inf)
    cand = np.argwhere(np.isinf(T) & np.isfinite(near))
    return cand, near[tuple(cand.T)]


def _resolve_folds(frame, cos, x0, grid, T, samples, step, horizon, starts=3, iters=25):
    """Fill nodes missed by the rasteriser with Gauss–Newton inversions."""
    cand, tnear = _hole_candidates(T, horizon, step)
    if cand.size == 0:
        return 0, 0
    sp_ = grid.spacing
    Y = np.asarray(grid.lo) + cand * sp_
    best = np.full(len(cand), np.inf)
    converged = np.zeros(len(cand), bool)
    for sheet, q, X in samples:
        nt = X.shape[1]
        flat = X.reshape(-1, grid.ndim) / sp_
        tree = cKDTree(flat)
        k = min(16, flat.shape[0])
        dist, ind = tree.query(Y / sp_, k=k, distance_upper_bound=4.0)
        # prefer the earliest passes within one cell, since the nearest
        # samples are often late loops of many-turn geodesics
        close = tree.query_ball_point(Y / sp_, r=1.0)
        rows, starts_q, starts_t = [], [], []
        for c in range(len(cand)):
            ok = np.asarray(close[c], dtype=np.int64)
            if ok.size:
                gap = np.linalg.norm(flat[ok] - Y[c] / sp_, axis=1)
                # a hole is at least as far as its nearest resolved neighbour
                ok = ok[(gap <= 0.5) & ((ok % nt) * step >= tnear[c] - 2 * step)]
            if ok.size == 0:
                ok = ind[c][np.isfinite(dist[c])]
            if ok.size == 0:
                continue
            tidx = ok % nt
            order = np.argsort(tidx, kind="stable")[:starts]
            for o in order:
                rows.append(c)
                starts_q.append(q[ok[o] // nt])
                starts_t.append(max(tidx[o], 1) * step)
        if not rows:
            continue
        rows = np.asarray(rows)
        z = np.column_stack([np.asarray(starts_q), np.asarray(starts_t)])
        t_sol, ok = _gauss_newton(frame, cos, sheet, x0, z, Y[rows], sp_, step, horizon, iters)
        for r, t, good in zip(rows, t_sol, ok):
            if good:
                converged[r] = True
                if t <= horizon and t < best[r]:
                    best[r] = t
    got = np.isfinite(best)
    T[tuple(cand[got].T)] = best[got]
    return int(got.sum()), int((~converged).sum())


def _endpoint(frame, cos, sheet, x0, z, step):
    t = np.maximum(z[:, -1], 1e-12)
    nsteps = max(1, int(math.ceil(t.max() / step)))
    P0 = cos.covectors(sheet, z[:, :-1])
    X, P = geodesic_flow(frame, x0, P0, t / nsteps, nsteps, record=False)
    vel, _ = _hamiltonian_rhs(frame, X, P)
    return X, vel


def _gauss_newton(frame, cos, sheet, x0, z, Y, sp_, step, horizon, iters, tol=1e-2):
    z = z.astype(float).copy()
    nq = z.shape[1] - 1
    X, vel = _endpoint(frame, cos, sheet, x0, z, step)
    F = (X - Y) / sp_
    res = np.linalg.norm(F, axis=1)
    stalled = np.zeros(len(z), bool)
    for _ in range(iters):
        act = np.flatnonzero((res > tol) & ~stalled)
        if act.size == 0:
            break
        za, Xa, Fa = z[act], X[act], F[act]
        Jc = np.empty(Fa.shape + (nq + 1,))
        for d in range(nq):
            eps = 1e-6 * np.maximum(1.0, np.abs(za[:, d]))
            zp = za.copy()
            zp[:, d] += eps
            Xp, _ = _endpoint(frame, cos, sheet, x0, zp, step)
            Jc[:, :, d] = (Xp - Xa) / sp_ / eps[:, None]
        Jc[:, :, nq] = vel[act] / sp_
        delta = -np.einsum("kij,kj->ki", np.linalg.pinv(Jc, rcond=1e-10), Fa)
        lam = np.ones(act.size)
        pending = np.ones(act.size, bool)
        for _ in range(6):
            sel = np.flatnonzero(pending)
            zn = za[sel] + lam[sel, None] * delta[sel]
            zn[:, -1] = np.clip(zn[:, -1], 1e-9, 2 * horizon)
            Xn, veln = _endpoint(frame, cos, sheet, x0, zn, step)
            Fn = (Xn - Y[act[sel]]) / sp_
            resn = np.linalg.norm(Fn, axis=1)
            better = resn < res[act[sel]]
            g = act[sel[better]]
            z[g], X[g], vel[g], F[g], res[g] = zn[better], Xn[better], veln[better], Fn[better], resn[better]
            pending[sel[better]] = False
            lam[sel] *= 0.5
            if not pending.any():
                break
        stalled[act[pending]] = True
    return z[:, -1], res < 0.05


# ---------------------------------------------------------------------------
# balls and doubling


def ball_volume(distfield: CCDistanceField, r: float) -> float:
    """``(#nodes with d_cc < r) * cell volume``.

    Raises :class:`GeometryError` when the ball reaches the box boundary or
    the distance horizon, because the count would then be truncated.
    """
    if r <= 0:
        raise ConfigurationError("radius must be positive")
    if r > distfield.horizon:
        raise GeometryError(f"radius {r} exceeds the distance horizon {distfield.horizon}")
    mask = distfield.values < r
    for ax in range(mask.ndim):
        if mask.take(0, axis=ax).any() or mask.take(-1, axis=ax).any():
            raise GeometryError(f"ball of radius {r} touches the grid boundary")
    return float(mask.sum() * distfield.grid.cell_volume)


@dataclass
class DoublingReport:
    ratio: float          # max over radii of |B(factor r)| / |B(r)|
    ratios: dict          # r -> ratio
    volumes: dict         # radius -> volume
    Q: float              # fitted homogeneous dimension
    C_B: float            # |B(r)| >= C_B (1/factor)^Q |B(factor r)|
    A: float              # rectangle doubling threshold 2^(Q+1) / C_B
    factor: float = 2.0


def doubling_constant(distfield: CCDistanceField, r_list, factor: float = 2.0) -> DoublingReport:
    """Ball doubling ratio, fitted homogeneous dimension and rectangle constant.

    ``Q`` is the slope of ``log |B(rho)|`` against ``log rho`` over all radii
    involved.  ``C_B`` is the largest constant with
    ``|B(r)| >= C_B factor^-Q |B(factor r)|`` on the sampled radii and
    ``A = 2^(Q+1) / C_B`` is the implied rectangle doubling threshold.
    """
    r_list = [float(r) for r in r_list]
    if not r_list:
        raise ConfigurationError("r_list must not be empty")
    radii = sorted(set(r_list) | {factor * r for r in r_list})
    vols = {rho: ball_volume(distfield, rho) for rho in radii}
    ratios = {r: vols[factor * r] / vols[r] for r in r_list}
    if len(radii) >= 2:
        Q = float(np.polyfit(np.log(radii), np.log([vols[r] for r in radii]), 1)[0])
    else:
        Q = float(distfield.grid.ndim)
    ratio = max(ratios.values())
    C_B = 1.0 if factor == 1.0 else float(factor ** Q / ratio)
    return DoublingReport(ratio, ratios, vols, Q, C_B, 2.0 ** (Q + 1) / C_B, factor)


# ---------------------------------------------------------------------------
# rectangles


ROLES = ("R", "R'", "R+", "R-", "R_nu", "lagged")


@dataclass(frozen=True)
class ParabolicRectangle:
    """``B_cc(center, r) x (t0, t1)``.

    ``center`` is a spatial point; ball membership is read from a distance
    field whose origin is that point.
    """

    center: tuple
    r: float
    t0: float
    t1: float
    role: str = "R"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.r > 0:
            raise ConfigurationError("rectangle radius must be positive")
        if not self.t0 < self.t1:
            raise ConfigurationError(f"empty time interval ({self.t0}, {self.t1})")
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown rectangle role {self.role!r}")

    @property
    def duration(self):
        return self.t1 - self.t0

    def with_(self, **kw):
        return replace(self, **kw)

    def spatial_mask(self, distfield: CCDistanceField):
        _check_center(self, distfield)
        if self.r > distfield.horizon:
            raise GeometryError(f"radius {self.r} exceeds the distance horizon")
        return distfield.values < self.r

    def time_mask(self, u: GridFunction):
        m = u.time_mask(self.t0, self.t1)
        if not m.any():
            raise GeometryError(f"no time level inside ({self.t0}, {self.t1})")
        if self.t0 < u.times[0] - 1e-9 or self.t1 > u.times[-1] + 1e-9:
            raise GeometryError(f"rectangle times ({self.t0}, {self.t1}) leave the solution's time range")
        return m

    def to_dict(self):
        return {"center": list(self.center), "r": self.r, "t0": self.t0, "t1": self.t1, "role": self.role}


def _check_center(rect, distfield):
    c = np.asarray(rect.center)
    if np.max(np.abs(c - distfield.origin_point) / distfield.grid.spacing) > 0.5 + 1e-9:
        raise GeometryError("distance field origin does not match the rectangle center")


def cacciopoli_rectangles(center, r_inner, r, tau_inner, tau, t0=0.0):
    """``R = B(r) x (t0, t0+tau)`` and ``R' = B(r') x (t0+tau', t0+tau)``.

    ``R'`` is where the cutoff equals one, which is the region the energy
    estimate controls.
    """
    _check_nested(r_inner, r, tau_inner, tau)
    R = ParabolicRectangle(center, r, t0, t0 + tau, "R")
    Rp = ParabolicRectangle(center, r_inner, t0 + tau_inner, t0 + tau, "R'")
    return Rp, R


def harnack_rectangles(center, r, tau, t0=0.0, radius_fraction=0.25,
                       minus=(1 / 8, 1 / 6), plus=(7 / 8, 1.0)):
    """``R, R+, R-`` with the default proportions ``r/4``, ``(tau/8, tau/6)``, ``(7tau/8, tau)``."""
    a, b = minus
    c, d = plus
    if not (0 < a < b < c < d <= 1):
        raise ConfigurationError("need 0 < tau1- < tau2- < tau+ < tau")
    if not 0 < radius_fraction < 1:
        raise ConfigurationError("radius fraction must lie in (0, 1)")
    R = ParabolicRectangle(center, r, t0, t0 + tau, "R")
    rp = radius_fraction * r
    Rplus = ParabolicRectangle(center, rp, t0 + c * tau, t0 + d * tau, "R+")
    Rminus = ParabolicRectangle(center, rp, t0 + a * tau, t0 + b * tau, "R-")
    return R, Rplus, Rminus


def _check_nested(r_inner, r, tau_inner, tau):
    if not 0 < r_inner < r:
        raise ConfigurationError(f"need 0 < r' < r, got r'={r_inner}, r={r}")
    if not 0 < tau_inner < tau:
        raise ConfigurationError(f"need 0 < tau' < tau, got tau'={tau_inner}, tau={tau}")


# ---------------------------------------------------------------------------
# cutoff functions


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass
class CutoffFunction:
    """``psi(x, t) = psi1(t) psi2(x)`` adapted to ``B(r') x (tau', tau)`` inside ``B(r) x (0, tau)``."""

    r_inner: float
    r: float
    tau_inner: float
    tau: float
    t0: float
    psi2: np.ndarray
    grad_max: float
    C_HG: float
    grid: Grid

    def psi1(self, t):
        s = (np.asarray(t, float) - self.t0) / self.tau_inner
        return np.clip(s, 0.0, 1.0)

    def dpsi1(self, t):
        t = np.asarray(t, float)
        inside = (t > self.t0) & (t < self.t0 + self.tau_inner)
        return np.where(inside, 1.0 / self.tau_inner, 0.0)

    def values(self, times):
        """``psi`` on a space-time lattice, shape ``(len(times),) + grid.shape``."""
        times = np.atleast_1d(np.asarray(times, float))
        return self.psi1(times).reshape((-1,) + (1,) * self.psi2.ndim) * self.psi2[None]

    def as_grid_function(self, times):
        return GridFunction(self.grid, self.values(times), np.asarray(times, float))


def make_cutoff(distfield: CCDistanceField, r_inner: float, r: float, tau_inner: float, tau: float,
                t0: float = 0.0, max_ratio: float = 0.8) -> CutoffFunction:
    """Cutoff with ``psi2 = 1 - smoothstep((d - r') / (r - r'))``.

    The measured ``max |grad_0 psi2|`` uses the same discrete fields as the
    solvers, and ``C_HG = max |grad_0 psi2| (r - r')``.  Radius pairs with
    ``r'/r > max_ratio`` are rejected: the balls must stay bounded away from
    each other for the gradient bound to be meaningful.
    """
    _check_nested(r_inner, r, tau_inner, tau)
    if r_inner / r > max_ratio:
        raise ConfigurationError(
            f"radius ratio r'/r = {r_inner / r:.3f} exceeds the cap {max_ratio}; balls too close")
    if r > distfield.horizon:
        raise GeometryError(f"radius {r} exceeds the distance horizon")
    d = distfield.values
    psi2 = 1.0 - smoothstep((d - r_inner) / (r - r_inner))
    psi2 = np.where(np.isfinite(d), psi2, 0.0)
    psi2[d >= r] = 0.0
    psi2[d <= r_inner] = 1.0
    grad = horizontal_gradient(distfield.frame, psi2, distfield.grid)
    gmax = float(np.max(grad.norm))
    return CutoffFunction(r_inner, r, tau_inner, tau, t0, psi2, gmax, gmax * (r - r_inner), distfield.grid)


# ---------------------------------------------------------------------------
# parabolic distance and lag maps


def parabolic_distance(p, q, mode: str = "max", dcc: float = None, distfield: CCDistanceField = None):
    """Parabolic distance between ``p = (x, t)`` and ``q = (y, s)``.

    ``mode='max'`` gives ``max(d_cc, sqrt|t-s|)``; ``mode='sum'`` gives
    ``d_cc + sqrt|t-s|``.  ``d_cc(x, y)`` is taken from ``dcc`` or read from a
    distance field with origin ``x``.
    """
    (x, t), (y, s) = p, q
    if dcc is None:
        if np.allclose(np.asarray(x, float), np.asarray(y, float)):
            dcc = 0.0
        elif distfield is None:
            raise ConfigurationError("need dcc or a distance field from x")
        else:
            dcc = distfield.at(y)
    tt = math.sqrt(abs(float(t) - float(s)))
    if mode == "max":
        return max(float(dcc), tt)
    if mode == "sum":
        return float(dcc) + tt
    raise ConfigurationError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class LagMapping:
    """``T((x,t), r) = ((x, t - 2 r^2), r)`` and ``S((x,t), r) = ((x, t - 2 r^2 / eta^2), r)``."""

    eta: float = 0.5
    t_min: Optional[float] = None
    K1: float = math.sqrt(2.0)
    K2: float = 1.0
    K3: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")

    def T(self, point, r):
        return self._shift(point, r, 2.0 * r * r)

    def S(self, point, r):
        return self._shift(point, r, 2.0 * r * r / self.eta ** 2)

    def _shift(self, point, r, lag):
        x, t = point
        tn = float(t) - lag
        if self.t_min is not None and tn < self.t_min - 1e-12:
            raise GeometryError(f"lagged time {tn} below the grid start {self.t_min}")
        return (x, tn), r

    def check(self, point, r):
        """The three lag-mapping inequalities for ``T`` at one point."""
        (xi, s), rho = self.T(point, r)
        d = parabolic_distance(point, (xi, s), "sum", dcc=0.0)
        return {
            "distance": d,
            "K1_bound": d <= self.K1 * r * (1 + 1e-12),
            "K2_bound": self.K2 * rho <= r * (1 + 1e-12),
            "K3_bound": r <= self.K3 * rho * (1 + 1e-12),
        }


def lag_map(point, r, eta=None, t_min=None):
    """``T`` (or ``S`` when ``eta`` is given) applied to ``(point, r)``."""
    lm = LagMapping(eta if eta is not None else 0.5, t_min)
    return lm.S(point, r) if eta is not None else lm.T(point, r)


class DistanceCache:
    """Distance fields for many centres on one grid, computed on demand.

    ``get(center, r)`` returns a field from the node nearest ``center`` whose
    horizon covers ``r``; fields are reused when their horizon suffices.
    """

    def __init__(self, frame: VectorFieldFrame, grid: Grid, step: float = None, margin: float = 1.25):
        self.frame = frame
        self.grid = grid
        self.step = step
        self.margin = margin
        self._fields = {}

    def get(self, center, r: float) -> CCDistanceField:
        idx = self.grid.nearest_node(center)
        f = self._fields.get(idx)
        if f is None or f.horizon < r:
            horizon = self.margin * r
            if self.step is not None:
                horizon = max(horizon, 2 * self.step)
            f = cc_distance_field(self.frame, self.grid, idx, step=self.step, horizon=horizon)
            self._fields[idx] = f
        return f

    def __len__(self):
        return len(self._fields)


def nsw_exponent(distfield: CCDistanceField):
    """Exponent ``eps`` in ``d_cc(x0, y) <= c^-1 |x0 - y|^eps`` near the origin.

    The envelope ``e(rho) = max{d_cc(x0, y) : |x0 - y| <= rho}`` is built from
    the nodes inside the distance horizon; ``eps`` is the slope of ``log e``
    against ``log rho`` through the nodes where the envelope increases.
    """
    grid = distfield.grid
    eu = np.linalg.norm(grid.points - distfield.origin_point, axis=1)
    d = distfield.values.ravel()
    finite = np.isfinite(d)
    reach = float(eu[~finite].min()) if (~finite).any() else float(eu.max())
    keep = finite & (eu > 0) & (eu < reach)
    scale = float(grid.spacing.min())
    r_s, inv = np.unique(np.round(eu[keep] / scale, 9), return_inverse=True)
    r_s = r_s * scale
    d_s = np.full(r_s.size, -np.inf)
    np.maximum.at(d_s, inv, d[keep])
    env = np.maximum.accumulate(d_s)
    rec = np.flatnonzero(np.r_[True, env[1:] > env[:-1] * (1 + 1e-9)])
    if rec.size < 3:
        raise GeometryError("too few resolved nodes inside the distance horizon to fit an exponent")
    slope, icpt = np.polyfit(np.log(r_s[rec]), np.log(env[rec]), 1)
    return float(slope), {"radii": r_s[rec].tolist(), "max_distance": env[rec].tolist(),
                          "c_inv": float(np.exp(icpt))}
