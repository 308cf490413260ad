"""Backend selection for the leapfrog kernels.

The compiled extension is used for one space dimension when it was built and
``CARLEMAN_LAB_PURE_PYTHON`` is unset; everything else runs the numpy version.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py as _numpy_backend

try:
    if os.environ.get("CARLEMAN_LAB_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from . import _kernels as _compiled_backend
except ImportError:
    _compiled_backend = None

BACKEND = "cython" if _compiled_backend is not None else "numpy"


def _use_compiled(u, backend):
    if backend == "numpy" or _compiled_backend is None:
        if backend == "cython" and _compiled_backend is None:
            raise RuntimeError("compiled kernels are not available")
        return False
    return u.ndim == 1


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _src(src):
    if src is None:
        return np.zeros((1, 1)), False
    return _c(src), True


def primal_sweep(u0, u1, a, c, beta, pot, src, h, k, backend=None):
    if _use_compiled(u0, backend):
        s, has = _src(src)
        return _compiled_backend.primal_sweep_1d(_c(u0), _c(u1), _c(a), _c(c), _c(beta[:, 0]),
                                                 _c(pot), s, has, float(h[0]), float(k))
    return _numpy_backend.primal_sweep(u0, u1, a, c, beta, pot, src, h, k)


def dual_sweep(y0, y1, a, c, beta, pot, src, h, k, backend=None):
    if _use_compiled(y0, backend):
        s, has = _src(src)
        return _compiled_backend.dual_sweep_1d(_c(y0), _c(y1), _c(a), _c(c), _c(beta[:, 0]),
                                               _c(pot), s, has, float(h[0]), float(k))
    return _numpy_backend.dual_sweep(y0, y1, a, c, beta, pot, src, h, k)


def primal_transpose(cot, a, c, beta, pot, h, k, backend=None):
    if _use_compiled(cot[0], backend):
        return _compiled_backend.primal_transpose_1d(_c(cot), _c(a), _c(c), _c(beta[:, 0]),
                                                     _c(pot), float(h[0]), float(k))
    return _numpy_backend.primal_transpose(cot, a, c, beta, pot, h, k)
