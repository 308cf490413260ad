# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled one-dimensional leapfrog kernels; same contract as ``_kernels_py``."""
import numpy as np


cdef inline double _at(double[:, ::1] U, Py_ssize_t m, Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0 or i >= n:
        return 0.0
    return U[m, i]


def primal_sweep_1d(double[::1] u0, double[::1] u1, double[:, ::1] a, double[:, ::1] c,
                    double[:, ::1] beta, double[:, ::1] pot, double[:, ::1] src, bint has_src,
                    double h, double k):
    cdef Py_ssize_t steps = a.shape[0] - 1
    cdef Py_ssize_t n = u0.shape[0]
    cdef Py_ssize_t m, i
    cdef double ih2 = 1.0 / (h * h), i2h = 0.5 / h, k2 = k * k
    cdef double left, right, centre, val
    out = np.empty((steps + 1, n))
    cdef double[:, ::1] U = out
    U[0, :] = u0
    if steps >= 1:
        U[1, :] = u1
    with nogil:
        for m in range(1, steps):
            for i in range(n):
                centre = U[m, i]
                left = _at(U, m, i - 1, n)
                right = _at(U, m, i + 1, n)
                val = 2.0 * centre + k2 * ((left - 2.0 * centre + right) * ih2
                                           + beta[m, i] * (right - left) * i2h
                                           + pot[m, i] * centre)
                val -= c[m, i] * U[m - 1, i]
                if has_src:
                    val += k2 * src[m, i]
                U[m + 1, i] = val / a[m, i]
    return out


def dual_sweep_1d(double[::1] y0, double[::1] y1, double[:, ::1] a, double[:, ::1] c,
                  double[:, ::1] beta, double[:, ::1] pot, double[:, ::1] src, bint has_src,
                  double h, double k):
    cdef Py_ssize_t steps = a.shape[0] - 1
    cdef Py_ssize_t n = y0.shape[0]
    cdef Py_ssize_t m, i
    cdef double ih2 = 1.0 / (h * h), i2h = 0.5 / h, k2 = k * k
    cdef double left, right, centre, flux_l, flux_r, val
    out = np.empty((steps + 1, n))
    cdef double[:, ::1] Y = out
    Y[0, :] = y0
    if steps >= 1:
        Y[1, :] = y1
    with nogil:
        for m in range(1, steps):
            for i in range(n):
                centre = Y[m, i]
                left = _at(Y, m, i - 1, n)
                right = _at(Y, m, i + 1, n)
                flux_l = beta[m, i - 1] * left if i > 0 else 0.0
                flux_r = beta[m, i + 1] * right if i < n - 1 else 0.0
                val = 2.0 * centre + k2 * ((left - 2.0 * centre + right) * ih2
                                           - (flux_r - flux_l) * i2h
                                           + pot[m, i] * centre)
                val -= a[m - 1, i] * Y[m - 1, i]
                if has_src:
                    val += k2 * src[m, i]
                Y[m + 1, i] = val / c[m + 1, i]
    return out


def primal_transpose_1d(double[:, ::1] cot, double[:, ::1] a, double[:, ::1] c,
                        double[:, ::1] beta, double[:, ::1] pot, double h, double k):
    cdef Py_ssize_t steps = a.shape[0] - 1
    cdef Py_ssize_t n = cot.shape[1]
    cdef Py_ssize_t m, i
    cdef double ih2 = 1.0 / (h * h), i2h = 0.5 / h, k2 = k * k
    cdef double left, right, centre, flux_l, flux_r
    lam_arr = np.array(cot, dtype=np.float64, copy=True)
    g_arr = np.empty(n)
    cdef double[:, ::1] lam = lam_arr
    cdef double[::1] g = g_arr
    with nogil:
        for m in range(steps - 1, 0, -1):
            for i in range(n):
                g[i] = lam[m + 1, i] / a[m, i]
            for i in range(n):
                centre = g[i]
                left = g[i - 1] if i > 0 else 0.0
                right = g[i + 1] if i < n - 1 else 0.0
                flux_l = beta[m, i - 1] * left if i > 0 else 0.0
                flux_r = beta[m, i + 1] * right if i < n - 1 else 0.0
                lam[m, i] += 2.0 * centre + k2 * ((left - 2.0 * centre + right) * ih2
                                                  - (flux_r - flux_l) * i2h
                                                  + pot[m, i] * centre)
                lam[m - 1, i] -= c[m, i] * centre
    return lam_arr[0].copy(), lam_arr[1].copy()
