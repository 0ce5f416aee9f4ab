"""Explicit solvers for ``u_t = -sum_i X_i^* F_i(x, t, grad_0 u)``.

Two kinds of flux are supported: the linear flux ``F_i = sum_j a_ij X_j u`` of
a :class:`CoefficientMatrix` and a structural nonlinear flux
``F = A(x, grad_0 u)`` described by :class:`NonlinearFlux`.  Both are advanced
with forward Euler using the sparse field matrices ``D_i`` of the frame and
their transposes, so ``sum_x u`` is conserved exactly up to round-off.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CFLViolation, ConfigurationError, DomainError, SolverBlowUp, StructuralViolation
from .frames import VectorFieldFrame, gradient_stack
from .grid import Grid, GridFunction

log = logging.getLogger(__name__)

CFL_SAFETY = 0.4


# ---------------------------------------------------------------------------
# fluxes


@dataclass
class CoefficientMatrix:
    """Measurable coefficients ``a(x, t)`` with ``lam^-1 |xi|^2 <= xi.a xi <= lam |xi|^2``.

    ``func(points, t)`` returns an array of shape ``(N, m, m)`` or a single
    ``(m, m)`` matrix broadcast to every node.
    """

    func: Callable
    lam: float
    m: int
    name: str = "custom"
    time_dependent: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.lam >= 1:
            raise ConfigurationError(f"ellipticity constant must be >= 1, got {self.lam}")

    def at(self, points, t: float):
        """Coefficients at arbitrary points, shape ``(N, m, m)``."""
        points = np.atleast_2d(points)
        a = np.asarray(self.func(points, t), float)
        a = np.broadcast_to(a, (points.shape[0], self.m, self.m))
        if not np.all(np.isfinite(a)):
            raise DomainError(f"coefficients {self.name!r} are not finite at t={t}")
        return a

    def evaluate(self, grid: Grid, t: float):
        key = (grid.lo, grid.hi, grid.shape, None if not self.time_dependent else float(t))
        a = self._cache.get(key)
        if a is None:
            a = self.at(grid.points, t)
            if not self.time_dependent:
                self._cache[key] = a
        return a

    def ellipticity_range(self, grid: Grid, times):
        """Smallest and largest eigenvalue of the symmetric part over sampled levels."""
        lo, hi = np.inf, -np.inf
        for t in np.atleast_1d(times):
            a = self.evaluate(grid, t)
            ev = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2)))
            lo, hi = min(lo, ev.min()), max(hi, ev.max())
        return float(lo), float(hi)

    def validate(self, grid: Grid, times, tol=1e-12):
        lo, hi = self.ellipticity_range(grid, times)
        if lo < 1 / self.lam - tol or hi > self.lam + tol:
            raise StructuralViolation(
                f"coefficients {self.name!r} leave the ellipticity band [{1 / self.lam:g}, {self.lam:g}]",
                {"min_eigenvalue": lo, "max_eigenvalue": hi})
        return lo, hi


def identity_coefficients(m: int) -> CoefficientMatrix:
    return CoefficientMatrix(lambda P, t: np.eye(m), 1.0, m, "identity", time_dependent=False)


def checkerboard_coefficients(m: int, lam: float = 2.0, cell: float = 0.25, period: float = None,
                              rotation: bool = False, axes=(0, 1)) -> CoefficientMatrix:
    """Space-time checkerboard with values ``lam^-1 I`` and ``lam I``.

    The parity of a node is ``floor(x_a / cell) + floor(x_b / cell)`` for the two
    coordinates in ``axes``, plus ``floor(t / period)`` when ``period`` is set.
    With ``rotation=True`` every cell instead carries ``R^T diag(lam, 1/lam) R``
    with ``R`` a rotation by ``+pi/4`` or ``-pi/4`` in the first two field
    indices, so the coefficients mix directions discontinuously.
    """
    if lam < 1:
        raise ConfigurationError("lam must be >= 1")
    a0, a1 = axes

    def parity(P, t):
        k = np.floor(P[:, a0] / cell) + np.floor(P[:, a1] / cell)
        if period is not None:
            k = k + math.floor(t / period)
        return (k.astype(np.int64) % 2) == 0

    if not rotation:
        def func(P, t):
            s = np.where(parity(P, t), lam, 1.0 / lam)
            return s[:, None, None] * np.eye(m)
    else:
        if m < 2:
            raise ConfigurationError("rotation variant needs m >= 2")
        c = math.cos(math.pi / 4)

        def func(P, t):
            sgn = np.where(parity(P, t), 1.0, -1.0)
            out = np.broadcast_to(np.eye(m), (P.shape[0], m, m)).copy()
            R = np.zeros((P.shape[0], 2, 2))
            R[:, 0, 0] = c
            R[:, 1, 1] = c
            R[:, 0, 1] = -sgn * c
            R[:, 1, 0] = sgn * c
            out[:, :2, :2] = np.einsum("kji,j,kjl->kil", R, np.array([lam, 1.0 / lam]), R)
            return out

    name = "checkerboard-rot" if rotation else "checkerboard"
    return CoefficientMatrix(func, float(lam), m, name, time_dependent=period is not None)


@dataclass
class NonlinearFlux:
    """``A(x, xi)`` with structural constants ``|A| <= C|xi|``, ``lam|xi|^2 <= A.xi <= Lam|xi|^2``.

    ``func(points, xi)`` receives node coordinates ``(N, n)`` and gradients
    ``(m, N)`` and returns ``(m, N)``.  ``M`` is the gradient cap under which
    the constants are claimed (``None`` for no cap).
    """

    func: Callable
    C: float
    lam: float
    Lam: float
    m: int
    M: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        if not (self.C > 0 and 0 < self.lam <= self.Lam):
            raise ConfigurationError("need C > 0 and 0 < lam <= Lam")

    def __call__(self, points, xi):
        return self.func(points, xi)

    def check(self, points, xi, tol=1e-12):
        """Raise :class:`StructuralViolation` at the first node breaking a bound."""
        A = np.asarray(self.func(points, xi), float)
        if A.shape != xi.shape:
            raise ConfigurationError(f"flux returned shape {A.shape}, expected {xi.shape}")
        n2 = np.sum(xi * xi, axis=0)
        dot = np.sum(A * xi, axis=0)
        absA = np.sqrt(np.sum(A * A, axis=0))
        scale = tol * np.maximum(1.0, n2)
        tests = [
            ("lower", dot < self.lam * n2 - scale),
            ("upper", dot > self.Lam * n2 + scale),
            ("growth", absA > self.C * np.sqrt(n2) + tol * np.maximum(1.0, np.sqrt(n2))),
        ]
        for label, bad in tests:
            if np.any(bad):
                k = int(np.flatnonzero(bad)[0])
                witness = {
                    "condition": label,
                    "node": k,
                    "point": [float(v) for v in np.atleast_2d(points)[k]],
                    "xi": [float(v) for v in xi[:, k]],
                    "A": [float(v) for v in A[:, k]],
                    "A_dot_xi": float(dot[k]),
                    "xi_norm2": float(n2[k]),
                    "constants": {"C": self.C, "lam": self.lam, "Lam": self.Lam},
                }
                raise StructuralViolation(
                    f"flux {self.name!r} violates the {label} structural bound at node {k}", witness)
        return A

    def check_zero(self, points):
        """Require ``A(x, 0) = 0``."""
        z = np.zeros((self.m, np.atleast_2d(points).shape[0]))
        A0 = np.asarray(self.func(points, z), float)
        if np.any(A0 != 0):
            k = int(np.flatnonzero(np.any(A0 != 0, axis=0))[0])
            raise StructuralViolation(f"flux {self.name!r} has A(x, 0) != 0",
                                      {"condition": "zero", "node": k, "A": A0[:, k].tolist()})


def _linear_flux(a, xi):
    """``F_i = sum_j a_ij xi_j`` for ``a`` of shape ``(N, m, m)`` and ``xi`` of shape ``(m, N)``."""
    return np.einsum("kij,jk->ik", a, xi)


def linear_flux(coeffs: CoefficientMatrix, t: float = 0.0) -> NonlinearFlux:
    """``A_i(x, xi) = sum_j a_ij(x, t) xi_j`` for coefficients frozen at time ``t``.

    Structural constants are ``C = lam``, ``lam^-1`` and ``lam``.
    """

    def func(points, xi):
        return _linear_flux(coeffs.at(points, t), xi)

    return NonlinearFlux(func, coeffs.lam, 1.0 / coeffs.lam, coeffs.lam, coeffs.m,
                         name=f"linear[{coeffs.name}]")


def mean_curvature_flux(m: int, M: float = 1.0) -> NonlinearFlux:
    """``A(xi) = xi / sqrt(1 + |xi|^2)``; constants ``(1, 1/sqrt(1+M^2), 1)`` for ``|xi| <= M``."""

    def func(points, xi):
        return xi / np.sqrt(1.0 + np.sum(xi * xi, axis=0))

    return NonlinearFlux(func, 1.0, 1.0 / math.sqrt(1.0 + M * M), 1.0, m, M, "mean-curvature")


def rational_flux(m: int, M: float = 1.0) -> NonlinearFlux:
    """``A(xi) = xi / (1 + |xi|^2)``; constants ``(1, 1/(1+M^2), 1)`` for ``|xi| <= M``."""

    def func(points, xi):
        return xi / (1.0 + np.sum(xi * xi, axis=0))

    return NonlinearFlux(func, 1.0, 1.0 / (1.0 + M * M), 1.0, m, M, "rational")


def scaled_flux(m: int, lam: float = 2.0) -> NonlinearFlux:
    """``A(xi) = (1 + (lam-1) |xi|^2 / (1 + |xi|^2)) xi``, a bounded nonlinear perturbation of the identity."""

    def func(points, xi):
        n2 = np.sum(xi * xi, axis=0)
        return (1.0 + (lam - 1.0) * n2 / (1.0 + n2)) * xi

    return NonlinearFlux(func, lam, 1.0, lam, m, None, "scaled")


# ---------------------------------------------------------------------------
# time stepping


def admissible_dt(frame: VectorFieldFrame, grid: Grid, lam: float, cfl_safety: float = CFL_SAFETY) -> float:
    """Largest explicit step: ``cfl_safety / (lam * K)``.

    ``K = max(m max_x max_i sum_k (b_i^k / h_k)^2, G / 2)`` where ``G`` is the
    Gershgorin bound of ``sum_i D_i^T D_i``.  On an isotropic lattice the first
    term is ``m max|b|^2 / dx^2``; the second guarantees ``dt lam rho(L) <= 2 cfl_safety``
    on anisotropic lattices and near the one-sided boundary rows.
    """
    B = frame.coefficients(grid.points)
    aniso = float(np.max(np.sum((B / grid.spacing) ** 2, axis=-1)))
    K = max(frame.m * aniso, 0.5 * frame.gershgorin_bound(grid))
    return cfl_safety / (lam * K)


def _check_cfl(frame, grid, lam, dt, cfl_safety):
    adm = admissible_dt(frame, grid, lam, cfl_safety)
    if dt > adm * (1 + 1e-12):
        raise CFLViolation(f"dt={dt:.3e} exceeds the admissible step {adm:.3e}", adm)
    return adm


def _divergence_step(u, frame, grid, F, dt):
    """``u - dt * sum_i D_i^T F_i`` for flat ``u`` of shape ``(size,)``."""
    Dts = frame.adjoint_operators(grid)
    div = Dts[0] @ F[0]
    for i in range(1, len(Dts)):
        div += Dts[i] @ F[i]
    out = u - dt * div
    if not np.all(np.isfinite(out)):
        raise SolverBlowUp("non-finite values after time step")
    return out


def _gradient(u, frame, grid):
    return np.stack([D @ u for D in frame.operators(grid)])


def _single_level(u):
    if isinstance(u, GridFunction):
        return u.grid, u.values[-1].ravel(), float(u.times[-1])
    raise ConfigurationError("expected a GridFunction")


def step_linear(u: GridFunction, frame: VectorFieldFrame, coeffs: CoefficientMatrix, dt: float,
                cfl_safety: float = CFL_SAFETY) -> GridFunction:
    """One forward Euler step of ``u_t = -sum_i X_i^*(sum_j a_ij X_j u)`` from the last level of ``u``."""
    grid, v, t = _single_level(u)
    _check_cfl(frame, grid, coeffs.lam, dt, cfl_safety)
    F = _linear_flux(coeffs.evaluate(grid, t), _gradient(v, frame, grid))
    out = _divergence_step(v, frame, grid, F, dt)
    return GridFunction(grid, out.reshape(grid.shape), np.array([t + dt]))


def step_nonlinear(u: GridFunction, frame: VectorFieldFrame, flux: NonlinearFlux, dt: float,
                   cfl_safety: float = CFL_SAFETY, tol: float = 1e-12) -> GridFunction:
    """One forward Euler step of ``u_t = -sum_j X_j^* A_j(x, grad_0 u)``.

    The structural bounds are checked at every node on the current gradient;
    a violation raises :class:`StructuralViolation` carrying the sample.
    """
    grid, v, t = _single_level(u)
    _check_cfl(frame, grid, flux.Lam, dt, cfl_safety)
    F = flux.check(grid.points, _gradient(v, frame, grid), tol)
    out = _divergence_step(v, frame, grid, F, dt)
    return GridFunction(grid, out.reshape(grid.shape), np.array([t + dt]))


# ---------------------------------------------------------------------------
# full solves


@dataclass
class Problem:
    """Initial-value problem on ``grid`` over ``(t0, t1)``.

    ``flux`` is a :class:`CoefficientMatrix` or a :class:`NonlinearFlux`;
    ``initial`` is an array of shape ``grid.shape`` or a callable
    ``initial(points) -> (N,)``.  ``dt=None`` picks ``0.9`` of the admissible
    step, adjusted so the interval is covered exactly.
    """

    frame: VectorFieldFrame
    grid: Grid
    flux: object
    initial: object
    t1: float
    t0: float = 0.0
    dt: Optional[float] = None
    save_every: int = 1
    cfl_safety: float = CFL_SAFETY
    positivity_floor: float = 0.0
    structural_tol: float = 1e-12

    @property
    def ellipticity(self):
        return self.flux.lam if isinstance(self.flux, CoefficientMatrix) else self.flux.Lam


def _time_grid(problem):
    adm = admissible_dt(problem.frame, problem.grid, problem.ellipticity, problem.cfl_safety)
    span = problem.t1 - problem.t0
    if span <= 0:
        raise ConfigurationError("need t1 > t0")
    if problem.dt is None:
        nsteps = int(math.ceil(span / (0.9 * adm)))
        # round up so that every save_every-th level lands on t1
        nsteps = -(-nsteps // max(1, problem.save_every)) * max(1, problem.save_every)
    else:
        if problem.dt > adm * (1 + 1e-12):
            raise CFLViolation(f"dt={problem.dt:.3e} exceeds the admissible step {adm:.3e}", adm)
        nsteps = int(round(span / problem.dt))
        if not math.isclose(nsteps * problem.dt, span, rel_tol=1e-9):
            raise ConfigurationError("dt must divide t1 - t0")
    nsteps = max(1, nsteps)
    return span / nsteps, nsteps, adm


def solve(problem: Problem) -> GridFunction:
    """March the problem from ``t0`` to ``t1``.

    Every ``save_every``-th level is stored.  ``meta`` records per-step
    minima and maxima, the step size, the admissible step and positivity
    alerts (steps whose minimum fell to or below ``positivity_floor``).
    """
    frame, grid = problem.frame, problem.grid
    if callable(problem.initial):
        u0 = np.asarray(problem.initial(grid.points), float).reshape(grid.shape)
    else:
        u0 = np.asarray(problem.initial, float)
        if u0.shape != grid.shape:
            raise ConfigurationError(f"initial data of shape {u0.shape} does not match {grid.shape}")
    if not np.all(np.isfinite(u0)):
        raise DomainError("initial data are not finite")
    if u0.min() <= 0:
        raise DomainError(f"initial data must be positive (min {u0.min():.3e})")
    dt, nsteps, adm = _time_grid(problem)
    if problem.save_every < 1 or nsteps % problem.save_every:
        raise ConfigurationError(f"save_every={problem.save_every} must divide the step count {nsteps}")

    linear = isinstance(problem.flux, CoefficientMatrix)
    if linear:
        if problem.flux.m != frame.m:
            raise ConfigurationError("coefficient size differs from the number of fields")
    else:
        if problem.flux.m != frame.m:
            raise ConfigurationError("flux size differs from the number of fields")
        problem.flux.check_zero(grid.points)

    v = u0.ravel().copy()
    saved = [u0.copy()]
    times = [problem.t0]
    mins, maxs, alerts = [float(v.min())], [float(v.max())], []
    pts = grid.points
    for k in range(nsteps):
        t = problem.t0 + k * dt
        xi = _gradient(v, frame, grid)
        if linear:
            F = _linear_flux(problem.flux.evaluate(grid, t), xi)
        else:
            try:
                F = problem.flux.check(pts, xi, problem.structural_tol)
            except StructuralViolation as exc:
                exc.witness["step"] = k
                exc.witness["t"] = t
                raise
        v = _divergence_step(v, frame, grid, F, dt)
        lo, hi = float(v.min()), float(v.max())
        mins.append(lo)
        maxs.append(hi)
        if lo <= problem.positivity_floor:
            alerts.append({"step": k + 1, "t": t + dt, "min": lo})
            log.warning("positivity alert at step %d: min u = %.3e", k + 1, lo)
        if (k + 1) % problem.save_every == 0:
            saved.append(v.reshape(grid.shape).copy())
            times.append(problem.t0 + (k + 1) * dt)
    out = GridFunction(grid, np.stack(saved), np.array(times))
    out.meta.update({
        "dt": dt, "steps": nsteps, "admissible_dt": adm, "min_per_step": np.array(mins),
        "max_per_step": np.array(maxs), "positivity_alerts": alerts, "flux": problem.flux.name,
        "frame": frame.name,
    })
    return out


# ---------------------------------------------------------------------------
# weak residual and Steklov averages


def _test_values(phi, u: GridFunction):
    if isinstance(phi, GridFunction):
        if phi.grid != u.grid or phi.nt != u.nt or not np.allclose(phi.times, u.times):
            raise ConfigurationError("test function must share grid and times with u")
        return phi.values
    if hasattr(phi, "values") and callable(phi.values):
        return phi.values(u.times)
    arr = np.asarray(phi, float)
    if arr.shape == u.grid.shape:
        return np.broadcast_to(arr, u.values.shape)
    if arr.shape == u.values.shape:
        return arr
    raise ConfigurationError("cannot interpret the test function")


def time_derivative(u: GridFunction):
    """Centered differences in time (one-sided at the ends)."""
    if u.nt < 2:
        raise ConfigurationError("time derivative needs at least two levels")
    return np.gradient(u.values, u.times, axis=0, edge_order=1)


def trapezoid_weights(times):
    times = np.asarray(times, float)
    w = np.zeros_like(times)
    if times.size < 2:
        return w
    d = np.diff(times)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def weak_residual(u: GridFunction, phi, frame: VectorFieldFrame, flux) -> float:
    """``iint phi u_t + sum_i F_i X_i phi dx dt`` on the lattice.

    ``phi`` is a :class:`GridFunction` on the same lattice, an object with a
    ``values(times)`` method (such as a cutoff function) or a spatial array.
    ``u_t`` uses centered differences and time integration uses the
    trapezoid rule; for solver output the result is of truncation order.
    """
    grid = u.grid
    P = _test_values(phi, u)
    ut = time_derivative(u)
    w = trapezoid_weights(u.times) * grid.cell_volume
    U = u.values.reshape(u.nt, -1)
    Pf = P.reshape(u.nt, -1)
    grad_u = gradient_stack(frame, grid, U)
    grad_p = gradient_stack(frame, grid, Pf)
    total = 0.0
    for k in range(u.nt):
        if w[k] == 0:
            continue
        if isinstance(flux, CoefficientMatrix):
            F = _linear_flux(flux.evaluate(grid, u.times[k]), grad_u[:, k])
        else:
            F = np.asarray(flux(grid.points, grad_u[:, k]), float)
        total += w[k] * (np.dot(Pf[k], ut[k].ravel()) + np.sum(F * grad_p[:, k]))
    return float(total)


def steklov_average(u: GridFunction, h: float) -> GridFunction:
    """``u_h(t) = h^-1 int_t^{t+h} u`` by the trapezoid rule; the result ends at ``T - h``."""
    if u.nt < 2:
        raise ConfigurationError("Steklov average needs at least two time levels")
    dt = float(np.diff(u.times).mean())
    if not np.allclose(np.diff(u.times), dt, rtol=1e-9, atol=0):
        raise ConfigurationError("Steklov average needs uniform time levels")
    if h < dt * (1 - 1e-9):
        raise ConfigurationError(f"h={h:g} is below the time step {dt:g}")
    k = int(round(h / dt))
    if not math.isclose(k * dt, h, rel_tol=1e-6):
        raise ConfigurationError(f"h={h:g} must be a multiple of the time step {dt:g}")
    if k >= u.nt:
        raise ConfigurationError("h exceeds the time extent")
    c = np.cumsum(u.values, axis=0)
    c = np.concatenate([np.zeros((1,) + u.values.shape[1:]), c])
    # trapezoid over levels j..j+k: sum - half of both ends
    s = c[k + 1:] - c[: u.nt - k]
    s = s - 0.5 * (u.values[: u.nt - k] + u.values[k:])
    vals = s * dt / (k * dt)
    return GridFunction(u.grid, vals, u.times[: u.nt - k], u.positive)
