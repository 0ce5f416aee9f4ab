"""Binary space-time field files.

Layout (all little-endian)::

    magic      8 bytes   b"SHFIELD\\0"
    version    uint32    1
    ndim       uint32
    nt         uint64    number of time levels
    shape      ndim x uint64
    lo         ndim x float64
    hi         ndim x float64
    spacing    ndim x float64
    times      nt x float64
    payload    nt * prod(shape) x float64, row-major (time slowest, last axis fastest)
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .grid import Grid, GridFunction

MAGIC = b"SHFIELD\0"
VERSION = 1


def encode_field(u: GridFunction) -> bytes:
    g = u.grid
    parts = [MAGIC, struct.pack("<IIQ", VERSION, g.ndim, u.nt),
             np.asarray(g.shape, "<u8").tobytes(),
             np.asarray(g.lo, "<f8").tobytes(),
             np.asarray(g.hi, "<f8").tobytes(),
             np.asarray(g.spacing, "<f8").tobytes(),
             np.asarray(u.times, "<f8").tobytes(),
             np.ascontiguousarray(u.values, "<f8").tobytes()]
    return b"".join(parts)


def decode_field(data: bytes) -> GridFunction:
    if data[:8] != MAGIC:
        raise ConfigurationError("not a field file (bad magic)")
    version, ndim, nt = struct.unpack_from("<IIQ", data, 8)
    if version != VERSION:
        raise ConfigurationError(f"unsupported field file version {version}")
    off = 8 + struct.calcsize("<IIQ")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype, count, off)
        off += arr.nbytes
        return arr

    shape = tuple(int(s) for s in take(ndim, "<u8"))
    lo, hi = take(ndim, "<f8"), take(ndim, "<f8")
    spacing = take(ndim, "<f8")
    times = take(nt, "<f8").copy()
    size = nt * int(np.prod(shape))
    if len(data) - off != 8 * size:
        raise ConfigurationError(f"payload holds {len(data) - off} bytes, expected {8 * size}")
    values = take(size, "<f8").reshape((nt,) + shape).astype(float)
    grid = Grid(tuple(lo), tuple(hi), shape)
    if not np.allclose(grid.spacing, spacing, rtol=1e-12, atol=0):
        raise ConfigurationError("header spacing disagrees with the box and shape")
    return GridFunction(grid, values, times)


def write_field(path, u: GridFunction) -> str:
    """Write ``u`` and return the SHA-256 hex digest of the file."""
    data = encode_field(u)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_field(path) -> GridFunction:
    return decode_field(Path(path).read_bytes())


def field_hash(u: GridFunction) -> str:
    return hashlib.sha256(encode_field(u)).hexdigest()
