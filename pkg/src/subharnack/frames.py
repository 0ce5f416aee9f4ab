"""Hörmander vector-field frames and their discrete actions.

A frame is a family of ``m`` smooth vector fields ``X_i = b_i . grad`` on a
box in R^n.  On a lattice each ``X_i`` becomes a sparse matrix ``D_i`` built
from centered differences (one-sided at the box boundary) multiplied by the
nodal values of ``b_i``.  The formal adjoint is realised as the plain
transpose ``D_i^T``.  With a uniform cell volume this is the exact adjoint
for the grid inner product, so summation by parts holds to round-off and the
explicit solvers conserve mass exactly.

For smooth ``g`` supported away from the boundary ``D_i^T g`` approximates
``-(div b_i) g - X_i g``, the continuum formal adjoint.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .grid import Grid, GridFunction

FD_STEP = 1e-5
RANK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class VectorFieldFrame:
    """``m`` vector fields on R^n.

    Parameters
    ----------
    name:
        Label used in reports and configs.
    dim:
        Ambient dimension ``n``.
    fields:
        ``fields(P)`` maps points of shape ``(N, n)`` to coefficients of shape
        ``(N, m, n)``; row ``i`` is ``b_i``.
    jacobians:
        Optional ``jacobians(P)`` of shape ``(N, m, n, n)`` with entry
        ``[., i, k, l] = d b_i^k / d x_l``.  Central differences with step
        ``1e-5`` are used when omitted.
    reference_box:
        ``(lo, hi)`` box on which the frame is meant to be sampled.
    """

    name: str
    dim: int
    num_fields: int
    fields: Callable[[np.ndarray], np.ndarray]
    jacobians: Optional[Callable[[np.ndarray], np.ndarray]] = None
    reference_box: tuple = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.num_fields > self.dim or self.num_fields < 1:
            raise ConfigurationError("need 1 <= m <= n fields")

    @property
    def m(self):
        return self.num_fields

    @property
    def n(self):
        return self.dim

    def coefficients(self, points):
        """``b_i(x)`` for every point, shape ``(N, m, n)``."""
        P = np.atleast_2d(np.asarray(points, float))
        B = np.asarray(self.fields(P), float)
        if B.shape != (P.shape[0], self.m, self.n):
            raise ConfigurationError(f"frame {self.name!r} returned shape {B.shape}")
        if not np.all(np.isfinite(B)):
            raise ConfigurationError(f"frame {self.name!r} has non-finite coefficients")
        return B

    def jacobian(self, points):
        """Jacobians of the coefficient maps, shape ``(N, m, n, n)``."""
        P = np.atleast_2d(np.asarray(points, float))
        if self.jacobians is not None:
            return np.asarray(self.jacobians(P), float)
        J = np.empty((P.shape[0], self.m, self.n, self.n))
        for l in range(self.n):
            e = np.zeros(self.n)
            e[l] = FD_STEP
            J[..., l] = (self.coefficients(P + e) - self.coefficients(P - e)) / (2 * FD_STEP)
        return J

    def bracket(self, i, j, points):
        """``[X_i, X_j]`` at the given points, shape ``(N, n)``."""
        P = np.atleast_2d(np.asarray(points, float))
        B = self.coefficients(P)
        J = self.jacobian(P)
        return np.einsum("nkl,nl->nk", J[:, j], B[:, i]) - np.einsum("nkl,nl->nk", J[:, i], B[:, j])

    # discrete operators -------------------------------------------------

    def operators(self, grid: Grid):
        """Sparse matrices ``D_i`` (CSR) discretising ``X_i`` on ``grid``."""
        key = (grid.lo, grid.hi, grid.shape)
        ops = self._cache.get(key)
        if ops is None:
            if grid.ndim != self.n:
                raise ConfigurationError(f"grid has dimension {grid.ndim}, frame needs {self.n}")
            partials = axis_derivatives(grid)
            B = self.coefficients(grid.points)
            ops = []
            for i in range(self.m):
                D = sp.csr_matrix((grid.size, grid.size))
                for k in range(self.n):
                    col = B[:, i, k]
                    if np.any(col != 0):
                        D = D + sp.diags(col) @ partials[k]
                ops.append(D.tocsr())
            ops = tuple(ops)
            self._cache[key] = ops
        return ops

    def adjoint_operators(self, grid: Grid):
        key = ("T", grid.lo, grid.hi, grid.shape)
        ops = self._cache.get(key)
        if ops is None:
            ops = tuple(D.T.tocsr() for D in self.operators(grid))
            self._cache[key] = ops
        return ops

    def max_coefficient_norm2(self, grid: Grid):
        """``max_x max_i |b_i(x)|^2`` over the grid nodes."""
        B = self.coefficients(grid.points)
        return float(np.max(np.sum(B ** 2, axis=-1)))

    def gershgorin_bound(self, grid: Grid):
        """Upper bound on the spectral radius of ``sum_i D_i^T D_i``."""
        key = ("G", grid.lo, grid.hi, grid.shape)
        g = self._cache.get(key)
        if g is None:
            L = sum(D.T @ D for D in self.operators(grid))
            g = float(np.max(np.asarray(abs(L).sum(axis=1)).ravel()))
            self._cache[key] = g
        return g


def axis_derivatives(grid: Grid):
    """Sparse first-derivative matrices along each axis of ``grid``."""
    mats = []
    for k, (s, h) in enumerate(zip(grid.shape, grid.spacing)):
        if s < 3:
            raise ConfigurationError(f"axis {k} has {s} nodes; at least 3 are required")
        d1 = _difference_1d(s, h)
        factors = [sp.identity(t, format="csr") for t in grid.shape]
        factors[k] = d1
        M = factors[0]
        for f in factors[1:]:
            M = sp.kron(M, f, format="csr")
        mats.append(M)
    return mats


def _difference_1d(s, h):
    main = np.zeros(s)
    upper = np.full(s - 1, 0.5 / h)
    lower = np.full(s - 1, -0.5 / h)
    main[0], upper[0] = -1.0 / h, 1.0 / h
    main[-1], lower[-1] = 1.0 / h, -1.0 / h
    return sp.diags([lower, main, upper], [-1, 0, 1], shape=(s, s), format="csr")


# grid-level actions ----------------------------------------------------


def _as_stack(grid, u):
    """Return values as ``(nt, size)`` plus a function restoring the input kind."""
    if isinstance(u, GridFunction):
        vals = u.values.reshape(u.nt, -1)
        return vals, lambda out: GridFunction(u.grid, out.reshape(u.values.shape), u.times)
    arr = np.asarray(u, float)
    if arr.shape == grid.shape:
        return arr.reshape(1, -1), lambda out: out.reshape(grid.shape)
    if arr.shape[1:] == grid.shape:
        return arr.reshape(arr.shape[0], -1), lambda out: out.reshape(arr.shape)
    raise ConfigurationError(f"array of shape {arr.shape} does not live on grid {grid.shape}")


def _check_index(frame, i):
    if not 0 <= i < frame.m:
        raise ConfigurationError(f"field index {i} out of range for m={frame.m}")


def apply_field(frame: VectorFieldFrame, i: int, u, grid: Grid = None):
    """Centered-difference discretisation of ``b_i . grad u``.

    ``u`` is a :class:`GridFunction` or an array on ``grid`` (spatial or with a
    leading time axis); the result has the same kind.
    """
    _check_index(frame, i)
    grid = u.grid if isinstance(u, GridFunction) else grid
    vals, wrap = _as_stack(grid, u)
    D = frame.operators(grid)[i]
    return wrap((D @ vals.T).T)


def apply_adjoint(frame: VectorFieldFrame, i: int, g, grid: Grid = None):
    """Exact discrete adjoint ``D_i^T g`` of :func:`apply_field`."""
    _check_index(frame, i)
    grid = g.grid if isinstance(g, GridFunction) else grid
    vals, wrap = _as_stack(grid, g)
    Dt = frame.adjoint_operators(grid)[i]
    return wrap((Dt @ vals.T).T)


@dataclass
class HorizontalGradient:
    """Components ``X_i u`` and the pointwise norm ``|grad_0 u|``."""

    components: list
    norm: np.ndarray

    @property
    def norm2(self):
        return self.norm ** 2


def horizontal_gradient(frame: VectorFieldFrame, u, grid: Grid = None) -> HorizontalGradient:
    comps = [apply_field(frame, i, u, grid) for i in range(frame.m)]
    arrs = [np.asarray(c.values if isinstance(c, GridFunction) else c) for c in comps]
    norm = np.sqrt(sum(a ** 2 for a in arrs))
    return HorizontalGradient(comps, norm)


def gradient_stack(frame: VectorFieldFrame, grid: Grid, values2d):
    """``X_i u`` for flattened values ``(nt, size)``; returns ``(m, nt, size)``."""
    return np.stack([(D @ values2d.T).T for D in frame.operators(grid)])


# Hörmander rank ----------------------------------------------------------


def _field_functions(frame):
    funcs = []
    for i in range(frame.m):
        f = (lambda p, i=i: frame.coefficients(p[None])[0, i])
        J = (lambda p, i=i: frame.jacobian(p[None])[0, i])
        funcs.append((f, J))
    return funcs


def _fd_jacobian(f, n):
    def J(p):
        out = np.empty((n, n))
        for l in range(n):
            e = np.zeros(n)
            e[l] = FD_STEP
            out[:, l] = (f(p + e) - f(p - e)) / (2 * FD_STEP)
        return out
    return J


def _bracket_fn(a, b, n):
    fa, Ja = a
    fb, Jb = b

    def f(p):
        return Jb(p) @ fa(p) - Ja(p) @ fb(p)
    return f, _fd_jacobian(f, n)


def hormander_rank(frame: VectorFieldFrame, point, depth: int) -> int:
    """Rank of the span of all brackets of length ``<= depth`` at ``point``.

    The rank counts singular values of the stacked bracket vectors above
    ``1e-9 * max(1, largest singular value)``.  If the full rank ``n`` is not
    reached the achieved rank is returned and the caller decides.
    """
    if depth < 1:
        raise ConfigurationError("depth must be >= 1")
    p = np.asarray(point, float)
    base = _field_functions(frame)
    levels = [base]
    vectors = [f(p) for f, _ in base]
    rank = _rank(vectors)
    for _ in range(2, depth + 1):
        if rank == frame.n:
            break
        new = [_bracket_fn(a, b, frame.n) for a, b in itertools.product(base, levels[-1])]
        vectors.extend(f(p) for f, _ in new)
        levels.append(new)
        rank = _rank(vectors)
    return rank


def _rank(vectors):
    M = np.asarray(vectors, float)
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > RANK_TOL * max(1.0, s.max(initial=0.0))))


# built-in frames -----------------------------------------------------------


def euclidean(n: int = 2) -> VectorFieldFrame:
    """Coordinate frame ``X_i = d/dx_i``."""
    def fields(P):
        return np.broadcast_to(np.eye(n), (P.shape[0], n, n)).copy()

    def jac(P):
        return np.zeros((P.shape[0], n, n, n))
    return VectorFieldFrame("euclidean", n, n, fields, jac, ((-1.0,) * n, (1.0,) * n))


def heisenberg() -> VectorFieldFrame:
    """``X_1 = d_x - (y/2) d_z``, ``X_2 = d_y + (x/2) d_z`` on R^3."""
    def fields(P):
        x, y = P[:, 0], P[:, 1]
        B = np.zeros((P.shape[0], 2, 3))
        B[:, 0, 0] = 1.0
        B[:, 0, 2] = -0.5 * y
        B[:, 1, 1] = 1.0
        B[:, 1, 2] = 0.5 * x
        return B

    def jac(P):
        J = np.zeros((P.shape[0], 2, 3, 3))
        J[:, 0, 2, 1] = -0.5
        J[:, 1, 2, 0] = 0.5
        return J
    return VectorFieldFrame("heisenberg", 3, 2, fields, jac, ((-1.0, -1.0, -0.5), (1.0, 1.0, 0.5)))


def grushin() -> VectorFieldFrame:
    """``X_1 = d_x``, ``X_2 = x d_y`` on R^2 (rank drops on ``x = 0``)."""
    def fields(P):
        B = np.zeros((P.shape[0], 2, 2))
        B[:, 0, 0] = 1.0
        B[:, 1, 1] = P[:, 0]
        return B

    def jac(P):
        J = np.zeros((P.shape[0], 2, 2, 2))
        J[:, 1, 1, 0] = 1.0
        return J
    return VectorFieldFrame("grushin", 2, 2, fields, jac, ((-1.0, -1.0), (1.0, 1.0)))


BUILTIN_FRAMES = {"euclidean": euclidean, "heisenberg": heisenberg, "grushin": grushin}


def get_frame(spec) -> VectorFieldFrame:
    """Resolve a built-in name, a mapping with polynomial fields, or a frame."""
    if isinstance(spec, VectorFieldFrame):
        return spec
    if isinstance(spec, str):
        if spec not in BUILTIN_FRAMES:
            raise ConfigurationError(f"unknown frame {spec!r}; built-ins are {sorted(BUILTIN_FRAMES)}")
        return BUILTIN_FRAMES[spec]()
    if isinstance(spec, dict):
        if "name" in spec and "fields" not in spec:
            name = spec["name"]
            if name == "euclidean" and "dim" in spec:
                return euclidean(int(spec["dim"]))
            return get_frame(name)
        return frame_from_spec(spec)
    raise ConfigurationError(f"cannot build a frame from {spec!r}")


def frame_from_spec(spec) -> VectorFieldFrame:
    """Build a user frame from polynomial coefficient expressions.

    ``spec`` is a mapping (or YAML text) like::

        name: my-frame
        variables: [x, y, z]
        fields:
          - ["1", "0", "-y/2"]
          - ["0", "1", "x/2"]

    Each entry must be a polynomial in the listed variables.  Jacobians use
    central differences unless ``jacobian: symbolic`` is given.
    """
    import sympy
    import yaml

    if isinstance(spec, str):
        spec = yaml.safe_load(spec)
    try:
        names = list(spec["variables"])
        rows = spec["fields"]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"frame spec needs 'variables' and 'fields': {exc}") from None
    n = len(names)
    syms = sympy.symbols(names)
    if n == 1:
        syms = (syms,) if not isinstance(syms, tuple) else syms
    exprs = []
    for r, row in enumerate(rows):
        if len(row) != n:
            raise ConfigurationError(f"field {r} has {len(row)} components, expected {n}")
        out = []
        for c, text in enumerate(row):
            try:
                e = sympy.sympify(str(text), locals=dict(zip(names, syms)))
            except (sympy.SympifyError, SyntaxError, TypeError) as exc:
                raise ConfigurationError(f"field {r} component {c}: cannot parse {text!r}") from exc
            if e.free_symbols - set(syms) or not e.is_polynomial(*syms):
                raise ConfigurationError(f"field {r} component {c}: {text!r} is not a polynomial in {names}")
            out.append(e)
        exprs.append(out)
    m = len(exprs)
    fn = sympy.lambdify(syms, exprs, "numpy")

    def fields(P):
        cols = [P[:, k] for k in range(n)]
        vals = fn(*cols)
        B = np.empty((P.shape[0], m, n))
        for i in range(m):
            for k in range(n):
                B[:, i, k] = np.broadcast_to(np.asarray(vals[i][k], float), (P.shape[0],))
        return B

    jac = None
    if spec.get("jacobian", "finite-difference") == "symbolic":
        jexprs = [[[sympy.diff(exprs[i][k], s) for s in syms] for k in range(n)] for i in range(m)]
        jfn = sympy.lambdify(syms, jexprs, "numpy")

        def jac(P):
            cols = [P[:, k] for k in range(n)]
            vals = jfn(*cols)
            J = np.empty((P.shape[0], m, n, n))
            for i in range(m):
                for k in range(n):
                    for l in range(n):
                        J[:, i, k, l] = np.broadcast_to(np.asarray(vals[i][k][l], float), (P.shape[0],))
            return J

    box = spec.get("box")
    ref = (tuple(box[0]), tuple(box[1])) if box else ((-1.0,) * n, (1.0,) * n)
    return VectorFieldFrame(spec.get("name", "user"), n, m, fields, jac, ref)
