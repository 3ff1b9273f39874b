# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-sample loops in :mod:`treecount._pykernels`."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, ceil, floor, sqrt

cnp.import_array()


def gaussian_density(double[::1] xs, double[::1] ys, Py_ssize_t h, Py_ssize_t w,
                     double sigma, double truncate=4.0):
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t radius = <Py_ssize_t>ceil(truncate * sigma)
    cdef Py_ssize_t k = 2 * radius + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] wx = np.empty(k, dtype=np.float64)
    cdef double[::1] wy = np.empty(k, dtype=np.float64)
    cdef double inv2s2 = 1.0 / (2.0 * sigma * sigma)
    cdef Py_ssize_t i, r, c, r0, r1, c0, c1, cx, cy
    cdef double x, y, sx, sy, d, norm

    for i in range(n):
        x = xs[i]
        y = ys[i]
        cx = <Py_ssize_t>floor(x + 0.5)
        cy = <Py_ssize_t>floor(y + 0.5)
        c0 = cx - radius if cx - radius > 0 else 0
        c1 = cx + radius + 1 if cx + radius + 1 < w else w
        r0 = cy - radius if cy - radius > 0 else 0
        r1 = cy + radius + 1 if cy + radius + 1 < h else h
        sx = 0.0
        for c in range(c0, c1):
            d = c - x
            wx[c - c0] = exp(-d * d * inv2s2)
            sx += wx[c - c0]
        sy = 0.0
        for r in range(r0, r1):
            d = r - y
            wy[r - r0] = exp(-d * d * inv2s2)
            sy += wy[r - r0]
        norm = 1.0 / (sx * sy)
        for r in range(r0, r1):
            for c in range(c0, c1):
                o[r, c] += wy[r - r0] * wx[c - c0] * norm
    return out


def local_maxima(double[:, ::1] m, double threshold):
    cdef Py_ssize_t h = m.shape[0]
    cdef Py_ssize_t w = m.shape[1]
    cdef Py_ssize_t r, c, dr, dc, rr, cc
    cdef double v, u
    cdef bint keep
    rows = []
    cols = []
    for r in range(h):
        for c in range(w):
            v = m[r, c]
            if v <= threshold:
                continue
            keep = True
            for dr in range(-1, 2):
                rr = r + dr
                if rr < 0 or rr >= h:
                    continue
                for dc in range(-1, 2):
                    cc = c + dc
                    if cc < 0 or cc >= w or (dr == 0 and dc == 0):
                        continue
                    u = m[rr, cc]
                    # plateaus keep only their first pixel in raster order
                    if u > v or (u == v and (dr < 0 or (dr == 0 and dc < 0))):
                        keep = False
                        break
                if not keep:
                    break
            if keep:
                rows.append(r)
                cols.append(c)
    out = np.empty((len(rows), 2), dtype=np.float64)
    if rows:
        out[:, 0] = rows
        out[:, 1] = cols
    return out


def greedy_match(double[:, ::1] pred, double[:, ::1] gt, double radius):
    cdef Py_ssize_t n = pred.shape[0]
    cdef Py_ssize_t g = gt.shape[0]
    cdef Py_ssize_t i, j, t, npairs = 0
    cdef double d, r2 = radius * radius
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist = np.empty(n * g, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pi = np.empty(n * g, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] gi = np.empty(n * g, dtype=np.int64)
    for i in range(n):
        for j in range(g):
            d = (pred[i, 0] - gt[j, 0]) ** 2 + (pred[i, 1] - gt[j, 1]) ** 2
            if d <= r2:
                dist[npairs] = d
                pi[npairs] = i
                gi[npairs] = j
                npairs += 1
    order = np.argsort(dist[:npairs], kind="stable")
    cdef cnp.int64_t[::1] o = order
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] pused = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] gused = np.zeros(g, dtype=np.uint8)
    matches = []
    for t in range(npairs):
        i = pi[o[t]]
        j = gi[o[t]]
        if pused[i] or gused[j]:
            continue
        pused[i] = 1
        gused[j] = 1
        matches.append((i, j))
    return matches
