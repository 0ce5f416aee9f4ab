"""Uniform Cartesian lattices and space-time grid functions.

Spatial fields are stored in C (row-major) order so that a field of shape
``grid.shape`` flattens to the node ordering used by every sparse operator
in the package.  A :class:`GridFunction` stacks such fields along a leading
time axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class Grid:
    """A box ``[lo, hi]`` sampled by ``shape`` nodes per axis (endpoints included)."""

    lo: tuple
    hi: tuple
    shape: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        shape = tuple(int(s) for s in self.shape)
        if not (len(lo) == len(hi) == len(shape)) or len(shape) == 0:
            raise ConfigurationError("lo, hi and shape must have the same positive length")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ConfigurationError(f"empty box: lo={lo}, hi={hi}")
        if any(s < 2 for s in shape):
            raise ConfigurationError(f"each axis needs at least 2 nodes, got {shape}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def centered(cls, half_widths, shape, center=None):
        half = np.asarray(half_widths, float)
        c = np.zeros_like(half) if center is None else np.asarray(center, float)
        return cls(tuple(c - half), tuple(c + half), tuple(shape))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self):
        return np.array([(h - l) / (s - 1) for l, h, s in zip(self.lo, self.hi, self.shape)])

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def axes(self):
        return [np.linspace(l, h, s) for l, h, s in zip(self.lo, self.hi, self.shape)]

    @cached_property
    def points(self):
        """All node coordinates, shape ``(size, ndim)``, in flattening order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        pts.setflags(write=False)
        return pts

    def coordinate(self, axis):
        """Coordinate ``axis`` as a field of shape ``self.shape``."""
        return self.points[:, axis].reshape(self.shape)

    def nearest_node(self, point):
        """Multi-index of the node closest to ``point``."""
        p = np.asarray(point, float)
        if p.shape != (self.ndim,):
            raise ConfigurationError(f"point must have {self.ndim} coordinates")
        idx = np.rint((p - np.asarray(self.lo)) / self.spacing).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            raise DomainError(f"point {p} lies outside the grid box")
        return tuple(int(i) for i in idx)

    def node_point(self, index):
        return np.asarray(self.lo) + np.asarray(index, float) * self.spacing

    def flat_index(self, index):
        return int(np.ravel_multi_index(tuple(index), self.shape))

    def contains(self, point, margin=0.0):
        p = np.asarray(point, float)
        return bool(np.all(p >= np.asarray(self.lo) + margin) and np.all(p <= np.asarray(self.hi) - margin))

    def refine(self, factor=2):
        """Grid over the same box with spacing divided by ``factor``."""
        return Grid(self.lo, self.hi, tuple((s - 1) * factor + 1 for s in self.shape))

    def scaled(self, scale):
        """Grid with roughly ``scale`` times as many cells per axis (odd node counts kept odd)."""
        shape = []
        for s in self.shape:
            cells = max(2, int(round((s - 1) * scale)))
            if (s - 1) % 2 == 0 and cells % 2:
                cells += 1
            shape.append(cells + 1)
        return Grid(self.lo, self.hi, tuple(shape))

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "shape": list(self.shape)}


@dataclass
class GridFunction:
    """Scalar values on a space-time lattice.

    ``values`` has shape ``(len(times),) + grid.shape``.  A purely spatial
    field is a grid function with a single time level.
    """

    grid: Grid
    values: np.ndarray
    times: np.ndarray = field(default=None)
    positive: bool = False
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape == self.grid.shape:
            v = v[None]
        if v.shape[1:] != self.grid.shape:
            raise ConfigurationError(
                f"values of shape {v.shape} do not match grid shape {self.grid.shape}")
        if self.times is None:
            self.times = np.zeros(1) if v.shape[0] == 1 else np.arange(v.shape[0], dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.times.shape != (v.shape[0],):
            raise ConfigurationError("times must have one entry per time level")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise DomainError("grid function contains non-finite values")
        if self.positive and v.min() <= 0:
            raise DomainError(f"positivity flag set but min value is {v.min():.3e}")
        self.values = v

    @classmethod
    def from_function(cls, grid, func, times=(0.0,), positive=False):
        """Sample ``func(points, t)`` at every node and time level."""
        pts = grid.points
        vals = np.stack([np.broadcast_to(np.asarray(func(pts, t), float), (grid.size,)).reshape(grid.shape)
                         for t in times])
        return cls(grid, vals, np.asarray(times, float), positive)

    @property
    def nt(self):
        return self.values.shape[0]

    @property
    def dt(self):
        """Uniform time step (``nan`` for a single level)."""
        if self.nt < 2:
            return float("nan")
        d = np.diff(self.times)
        return float(d.mean())

    @property
    def spacings(self):
        return tuple(self.grid.spacing) + (self.dt,)

    def slice(self, k):
        return self.values[k]

    def time_mask(self, t0, t1):
        """Time levels with ``t0 <= t <= t1`` (tolerant to round-off)."""
        eps = 1e-9 * max(1.0, abs(t1) + abs(t0))
        return (self.times >= t0 - eps) & (self.times <= t1 + eps)

    def time_index(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        return k

    def with_values(self, values, times=None, positive=None):
        return GridFunction(self.grid, values, self.times if times is None else times,
                            self.positive if positive is None else positive)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)
