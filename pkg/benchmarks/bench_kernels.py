"""Compare the compiled and numpy leapfrog kernels on 1D grids (timing and agreement)."""
import argparse
import timeit

import numpy as np

from carleman_lab import kernels
from carleman_lab.mesh import SpatialDomain, build_grid
from carleman_lab.wave import leapfrog_operator, preset


def cases(op, rng):
    shape = op.grid.interior_shape
    u0, u1 = rng.standard_normal(shape), rng.standard_normal(shape)
    src = rng.standard_normal(op.a.shape)
    cot = rng.standard_normal(op.a.shape)
    return {
        "primal_sweep": lambda b: kernels.primal_sweep(u0, u1, op.a, op.c, op.beta, op.V, src, op.h, op.k, backend=b),
        "dual_sweep": lambda b: kernels.dual_sweep(u0, u1, op.a, op.c, op.beta, op.pot_dual, src, op.h, op.k,
                                                   backend=b),
        "primal_transpose": lambda b: np.concatenate(
            kernels.primal_transpose(cot, op.a, op.c, op.beta, op.V, op.h, op.k, backend=b)),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--nodes", type=int, nargs="+", default=[101, 201, 401])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'nodes':>7}{'numpy [ms]':>13}{'cython [ms]':>13}{'speedup':>9}{'max diff':>11}")
    for nodes in args.nodes:
        grid = build_grid(SpatialDomain.interval(1.0, 2.0, 0.0), 2.5, nodes)
        op = leapfrog_operator(preset("timedep"), grid)
        for name, fn in cases(op, rng).items():
            t_np = min(timeit.repeat(lambda: fn("numpy"), number=1, repeat=args.repeat)) * 1e3
            if kernels.BACKEND == "cython":
                t_cy = min(timeit.repeat(lambda: fn("cython"), number=1, repeat=args.repeat)) * 1e3
                diff = float(np.max(np.abs(fn("numpy") - fn("cython"))))
                print(f"{name:<18}{nodes:>7}{t_np:>13.2f}{t_cy:>13.2f}{t_np / t_cy:>9.1f}{diff:>11.1e}")
            else:
                print(f"{name:<18}{nodes:>7}{t_np:>13.2f}{'-':>13}{'-':>9}{'-':>11}")


if __name__ == "__main__":
    main()
