# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: dense assignment solve and rectangle ownership mask.

Mirrors ``pure.py`` exactly, including tie-breaks (lowest row, then lowest
column). Keep the two in sync.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

__all__ = ["solve_dense", "keep_in_rect"]

cdef double INF = float("inf")


def solve_dense(cost):
    """Minimum-cost one-to-one assignment on a dense rectangular matrix.

    Same contract as the pure kernel: min(n, m) pairs, finite entries only,
    (rows, cols, total) with rows ascending.
    """
    a_in = np.ascontiguousarray(cost, dtype=np.float64)
    if a_in.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    cdef Py_ssize_t n = a_in.shape[0]
    cdef Py_ssize_t m = a_in.shape[1]
    if n == 0 or m == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp), 0.0
    if not np.isfinite(a_in).all():
        raise ValueError("cost matrix entries must be finite")

    cdef bint transposed = n > m
    a_np = np.ascontiguousarray(a_in.T) if transposed else a_in
    if transposed:
        n, m = m, n

    cdef double[:, ::1] a = a_np
    u_np = np.zeros(n + 1, dtype=np.float64)
    v_np = np.zeros(m + 1, dtype=np.float64)
    p_np = np.zeros(m + 1, dtype=np.intp)
    way_np = np.zeros(m + 1, dtype=np.intp)
    minv_np = np.empty(m + 1, dtype=np.float64)
    used_np = np.empty(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_np
    cdef double[::1] v = v_np
    cdef Py_ssize_t[::1] p = p_np
    cdef Py_ssize_t[::1] way = way_np
    cdef double[::1] minv = minv_np
    cdef cnp.uint8_t[::1] used = used_np

    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double cur, delta

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INF
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    cols = np.nonzero(p_np[1:])[0]
    rows = p_np[1:][cols] - 1
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    rows = rows[order].astype(np.intp)
    cols = cols[order].astype(np.intp)
    total = float(a_in[rows, cols].sum())
    return rows, cols, total


def keep_in_rect(x, y, double x_lo, double x_hi, double y_lo, double y_hi):
    """Half-open containment mask: lo <= coord < hi on both axes."""
    x_np = np.ascontiguousarray(x, dtype=np.float64)
    y_np = np.ascontiguousarray(y, dtype=np.float64)
    if x_np.shape[0] != y_np.shape[0]:
        raise ValueError("x and y must have equal length")
    cdef double[::1] xv = x_np
    cdef double[::1] yv = y_np
    cdef Py_ssize_t k = xv.shape[0]
    out_np = np.empty(k, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_np
    cdef Py_ssize_t i
    for i in range(k):
        out[i] = (
            xv[i] >= x_lo and xv[i] < x_hi and yv[i] >= y_lo and yv[i] < y_hi
        )
    return out_np.view(np.bool_)
