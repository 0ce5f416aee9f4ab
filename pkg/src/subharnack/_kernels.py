"""Compiled inner loops (numba) used by the geometry module.

``raster2`` and ``raster3`` scan-convert a simplicial mesh of a parameter
domain, pushed forward into space by the geodesic exponential map, onto the
lattice.  Every lattice node inside an image simplex receives the linearly
interpolated arrival time and keeps the minimum over all simplices.
"""
import itertools

import numba as nb
import numpy as np

_PERMS3 = np.array(list(itertools.permutations(range(3))), dtype=np.int64)


def _kuhn_offsets():
    offs = np.zeros((6, 4, 3), dtype=np.int64)
    for q, perm in enumerate(_PERMS3):
        cur = np.zeros(3, dtype=np.int64)
        for s in range(3):
            cur[perm[s]] += 1
            offs[q, s + 1] = cur
    return offs


KUHN3 = _kuhn_offsets()
TRI2 = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [0, 1], [1, 1]]], dtype=np.int64)


@nb.njit(cache=True)
def raster2(X, tvals, T, lo, sp, sh, periodic, tri):
    A, C, _ = X.shape
    na = A if periodic else A - 1
    V = np.empty((3, 2))
    tv = np.empty(3)
    for a in range(na):
        for c in range(C - 1):
            for q in range(2):
                for s in range(3):
                    ia = (a + tri[q, s, 0]) % A
                    ic = c + tri[q, s, 1]
                    V[s, 0] = X[ia, ic, 0]
                    V[s, 1] = X[ia, ic, 1]
                    tv[s] = tvals[ic]
                x0 = min(V[0, 0], min(V[1, 0], V[2, 0]))
                x1 = max(V[0, 0], max(V[1, 0], V[2, 0]))
                y0 = min(V[0, 1], min(V[1, 1], V[2, 1]))
                y1 = max(V[0, 1], max(V[1, 1], V[2, 1]))
                i0 = max(0, int(np.ceil((x0 - lo[0]) / sp[0] - 1e-9)))
                i1 = min(sh[0] - 1, int(np.floor((x1 - lo[0]) / sp[0] + 1e-9)))
                j0 = max(0, int(np.ceil((y0 - lo[1]) / sp[1] - 1e-9)))
                j1 = min(sh[1] - 1, int(np.floor((y1 - lo[1]) / sp[1] + 1e-9)))
                if i1 < i0 or j1 < j0:
                    continue
                m00 = V[1, 0] - V[0, 0]
                m01 = V[2, 0] - V[0, 0]
                m10 = V[1, 1] - V[0, 1]
                m11 = V[2, 1] - V[0, 1]
                det = m00 * m11 - m01 * m10
                if det == 0.0:
                    continue
                for i in range(i0, i1 + 1):
                    px = lo[0] + i * sp[0] - V[0, 0]
                    for j in range(j0, j1 + 1):
                        py = lo[1] + j * sp[1] - V[0, 1]
                        l1 = (px * m11 - m01 * py) / det
                        l2 = (m00 * py - px * m10) / det
                        l0 = 1.0 - l1 - l2
                        if l0 >= -1e-9 and l1 >= -1e-9 and l2 >= -1e-9:
                            tt = l0 * tv[0] + l1 * tv[1] + l2 * tv[2]
                            lin = i * sh[1] + j
                            if tt < T[lin]:
                                T[lin] = tt
    return T


@nb.njit(cache=True)
def raster3(X, tvals, T, lo, sp, sh, periodic, offs):
    A, Bn, C, _ = X.shape
    na = A if periodic else A - 1
    V = np.empty((4, 3))
    tv = np.empty(4)
    i0 = np.empty(3, np.int64)
    i1 = np.empty(3, np.int64)
    for a in range(na):
        for b in range(Bn - 1):
            for c in range(C - 1):
                for q in range(6):
                    for s in range(4):
                        ia = (a + offs[q, s, 0]) % A
                        ib = b + offs[q, s, 1]
                        ic = c + offs[q, s, 2]
                        for d in range(3):
                            V[s, d] = X[ia, ib, ic, d]
                        tv[s] = tvals[ic]
                    ok = True
                    for d in range(3):
                        mn = V[0, d]
                        mx = V[0, d]
                        for s in range(1, 4):
                            mn = min(mn, V[s, d])
                            mx = max(mx, V[s, d])
                        i0[d] = max(0, int(np.ceil((mn - lo[d]) / sp[d] - 1e-9)))
                        i1[d] = min(sh[d] - 1, int(np.floor((mx - lo[d]) / sp[d] + 1e-9)))
                        if i1[d] < i0[d]:
                            ok = False
                    if not ok:
                        continue
                    m00 = V[1, 0] - V[0, 0]
                    m01 = V[2, 0] - V[0, 0]
                    m02 = V[3, 0] - V[0, 0]
                    m10 = V[1, 1] - V[0, 1]
                    m11 = V[2, 1] - V[0, 1]
                    m12 = V[3, 1] - V[0, 1]
                    m20 = V[1, 2] - V[0, 2]
                    m21 = V[2, 2] - V[0, 2]
                    m22 = V[3, 2] - V[0, 2]
                    c00 = m11 * m22 - m12 * m21
                    c01 = m10 * m22 - m12 * m20
                    c02 = m10 * m21 - m11 * m20
                    det = m00 * c00 - m01 * c01 + m02 * c02
                    if det == 0.0:
                        continue
                    for i in range(i0[0], i1[0] + 1):
                        px = lo[0] + i * sp[0] - V[0, 0]
                        for j in range(i0[1], i1[1] + 1):
                            py = lo[1] + j * sp[1] - V[0, 1]
                            for k in range(i0[2], i1[2] + 1):
                                pz = lo[2] + k * sp[2] - V[0, 2]
                                l1 = (px * c00 - m01 * (py * m22 - m12 * pz) + m02 * (py * m21 - m11 * pz)) / det
                                l2 = (m00 * (py * m22 - m12 * pz) - px * c01 + m02 * (m10 * pz - py * m20)) / det
                                l3 = (m00 * (m11 * pz - py * m21) - m01 * (m10 * pz - py * m20) + px * c02) / det
                                l0 = 1.0 - l1 - l2 - l3
                                if l0 >= -1e-9 and l1 >= -1e-9 and l2 >= -1e-9 and l3 >= -1e-9:
                                    tt = l0 * tv[0] + l1 * tv[1] + l2 * tv[2] + l3 * tv[3]
                                    lin = (i * sh[1] + j) * sh[2] + k
                                    if tt < T[lin]:
                                        T[lin] = tt
    return T
