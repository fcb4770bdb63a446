# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay numerically identical to ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def render_segments(double[:, ::1] segments, double[::1] radii, int size):
    """Anti-aliased coverage of thick segments on a ``size`` x ``size`` grid."""
    cdef Py_ssize_t n = segments.shape[0]
    cdef Py_ssize_t r, c, s
    cdef double px, py, ax, ay, dx, dy, l2, t, qx, qy, d, cov, best
    out = np.zeros((size, size), dtype=np.float64)
    cdef double[:, ::1] o = out
    for r in range(size):
        py = r + 0.5
        for c in range(size):
            px = c + 0.5
            best = 0.0
            for s in range(n):
                ax = segments[s, 0]
                ay = segments[s, 1]
                dx = segments[s, 2] - ax
                dy = segments[s, 3] - ay
                l2 = dx * dx + dy * dy
                if l2 > 0.0:
                    t = ((px - ax) * dx + (py - ay) * dy) / l2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                qx = ax + t * dx
                qy = ay + t * dy
                d = sqrt((px - qx) * (px - qx) + (py - qy) * (py - qy))
                cov = radii[s] + 0.5 - d
                if cov > best:
                    best = cov
            if best > 1.0:
                best = 1.0
            o[r, c] = best
    return out


def kendall_counts(double[::1] x, double[::1] y):
    """Pair counts (concordant, discordant, tied_x, tied_y) over all i < j.

    ``tied_x`` includes pairs tied in both coordinates, likewise ``tied_y``.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, j
    cdef long long conc = 0, disc = 0, tx = 0, ty = 0
    cdef double sx, sy
    for i in range(n):
        for j in range(i + 1, n):
            sx = x[i] - x[j]
            sy = y[i] - y[j]
            if sx == 0.0:
                tx += 1
            if sy == 0.0:
                ty += 1
            if sx == 0.0 or sy == 0.0:
                continue
            if (sx > 0.0) == (sy > 0.0):
                conc += 1
            else:
                disc += 1
    return conc, disc, tx, ty
