"""Numpy leapfrog kernels on interior nodes (homogeneous Dirichlet data outside).

Array conventions, with ``L = steps + 1`` time levels:
``a, c, pot``: (L, *interior); ``beta``: (L, n, *interior); ``src``: (L, *interior) or None.
The primal recursion is
    a[m] U[m+1] = 2 U[m] + k^2 (Lap U[m] + beta[m].grad U[m] + pot[m] U[m]) - c[m] U[m-1] + k^2 src[m]
and the dual recursion is its transpose in time and space.
"""
from __future__ import annotations

import numpy as np


def _shift(u, axis, offset):
    """u translated by ``offset`` along ``axis`` with zero fill (Dirichlet neighbours)."""
    out = np.zeros_like(u)
    n = u.shape[axis]
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if offset > 0:
        src[axis], dst[axis] = slice(offset, n), slice(0, n - offset)
    else:
        src[axis], dst[axis] = slice(0, n + offset), slice(-offset, n)
    out[tuple(dst)] = u[tuple(src)]
    return out


def laplacian(u, h):
    out = np.zeros_like(u)
    for axis, dx in enumerate(h):
        out += (_shift(u, axis, 1) - 2 * u + _shift(u, axis, -1)) / dx**2
    return out


def gradient(u, axis, dx):
    return (_shift(u, axis, 1) - _shift(u, axis, -1)) / (2 * dx)


def primal_apply(u, beta, pot, h, k2):
    out = laplacian(u, h) + pot * u
    for axis, dx in enumerate(h):
        out += beta[axis] * gradient(u, axis, dx)
    return 2 * u + k2 * out


def dual_apply(y, beta, pot, h, k2):
    out = laplacian(y, h) + pot * y
    for axis, dx in enumerate(h):
        out -= gradient(beta[axis] * y, axis, dx)
    return 2 * y + k2 * out


def primal_sweep(u0, u1, a, c, beta, pot, src, h, k):
    steps = a.shape[0] - 1
    k2 = k * k
    U = np.empty((steps + 1,) + u0.shape)
    U[0], U[1] = u0, u1
    for m in range(1, steps):
        val = primal_apply(U[m], beta[m], pot[m], h, k2) - c[m] * U[m - 1]
        if src is not None:
            val += k2 * src[m]
        U[m + 1] = val / a[m]
    return U


def dual_sweep(y0, y1, a, c, beta, pot, src, h, k):
    steps = a.shape[0] - 1
    k2 = k * k
    Y = np.empty((steps + 1,) + y0.shape)
    Y[0], Y[1] = y0, y1
    for m in range(1, steps):
        val = dual_apply(Y[m], beta[m], pot[m], h, k2) - a[m - 1] * Y[m - 1]
        if src is not None:
            val += k2 * src[m]
        Y[m + 1] = val / c[m + 1]
    return Y


def primal_transpose(cot, a, c, beta, pot, h, k):
    """Reverse-mode sweep of ``primal_sweep``: returns the cotangents of levels 0 and 1."""
    steps = a.shape[0] - 1
    k2 = k * k
    lam = np.array(cot, dtype=float, copy=True)
    for m in range(steps - 1, 0, -1):
        g = lam[m + 1] / a[m]
        lam[m] += dual_apply(g, beta[m], pot[m], h, k2)
        lam[m - 1] -= c[m] * g
    return lam[0].copy(), lam[1].copy()
