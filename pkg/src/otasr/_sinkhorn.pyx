# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled log-domain Sinkhorn sweeps (hot loop of the transport solver).

Mirrors ot._solve_py exactly: alternating row/column log-sum-exp updates of
the dual vectors, with the marginal violation of the implied coupling checked
after every sweep. Kept free of Python objects inside the loops.
"""

from libc.math cimport exp, log, fabs

import numpy as np


def solve(double[:, ::1] logK, double[::1] loga, double[::1] logb,
          double tol, int max_iter):
    """Return (u, v, iterations, converged) for the given log kernel."""
    cdef Py_ssize_t n = logK.shape[0]
    cdef Py_ssize_t m = logK.shape[1]
    u_arr = np.zeros(n, dtype=np.float64)
    v_arr = np.zeros(m, dtype=np.float64)
    a_arr = np.exp(np.asarray(loga))
    b_arr = np.exp(np.asarray(logb))
    row_arr = np.zeros(n, dtype=np.float64)
    col_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] a = a_arr
    cdef double[::1] b = b_arr
    cdef double[::1] row_sum = row_arr
    cdef double[::1] col_sum = col_arr

    cdef Py_ssize_t i, j
    cdef int iters = 0
    cdef bint converged = 0
    cdef double best, s, g, viol, d

    while iters < max_iter:
        # u_i = loga_i - LSE_j(logK_ij + v_j)
        for i in range(n):
            best = logK[i, 0] + v[0]
            for j in range(1, m):
                d = logK[i, j] + v[j]
                if d > best:
                    best = d
            s = 0.0
            for j in range(m):
                s += exp(logK[i, j] + v[j] - best)
            u[i] = loga[i] - (best + log(s))
        # v_j = logb_j - LSE_i(logK_ij + u_i)
        for j in range(m):
            best = logK[0, j] + u[0]
            for i in range(1, n):
                d = logK[i, j] + u[i]
                if d > best:
                    best = d
            s = 0.0
            for i in range(n):
                s += exp(logK[i, j] + u[i] - best)
            v[j] = logb[j] - (best + log(s))
        iters += 1

        for i in range(n):
            row_sum[i] = 0.0
        for j in range(m):
            col_sum[j] = 0.0
        for i in range(n):
            for j in range(m):
                g = exp(u[i] + logK[i, j] + v[j])
                row_sum[i] += g
                col_sum[j] += g
        viol = 0.0
        for i in range(n):
            d = fabs(row_sum[i] - a[i])
            if d > viol:
                viol = d
        for j in range(m):
            d = fabs(col_sum[j] - b[j])
            if d > viol:
                viol = d
        if viol <= tol:
            converged = 1
            break

    return u_arr, v_arr, iters, converged
