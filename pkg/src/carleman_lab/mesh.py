"""Space-time grids, region masks with cut-cell fractions, quadrature and the H^-1 norm."""
from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class SpatialDomain:
    bounds: tuple
    x0: tuple

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not bounds or len(bounds) > 2:
            raise ValueError("only intervals and 2D boxes are supported")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"degenerate axis ({lo}, {hi})")
        x0 = tuple(float(c) for c in np.atleast_1d(self.x0))
        if len(x0) != len(bounds):
            raise ValueError("x0 must have one entry per axis")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "x0", x0)

    @classmethod
    def interval(cls, lo, hi, x0=0.0):
        return cls(((lo, hi),), (x0,))

    @classmethod
    def box(cls, xlim, ylim, x0=(0.0, 0.0)):
        return cls((tuple(xlim), tuple(ylim)), tuple(x0))

    @property
    def n(self) -> int:
        return len(self.bounds)

    @property
    def kind(self) -> str:
        return "interval" if self.n == 1 else "box"

    @property
    def diameter(self) -> float:
        return math.sqrt(sum((hi - lo) ** 2 for lo, hi in self.bounds))

    def corners(self):
        return np.array(list(itertools.product(*self.bounds)))

    def contains_closure(self, point) -> bool:
        point = np.atleast_1d(point)
        return all(lo <= c <= hi for c, (lo, hi) in zip(point, self.bounds))

    def radius_range(self, center):
        """(inf, sup) of |x - center| over the closed domain."""
        center = np.atleast_1d(np.asarray(center, float))
        sup = float(np.max(np.linalg.norm(self.corners() - center, axis=1)))
        nearest = np.array([min(max(c, lo), hi) for c, (lo, hi) in zip(center, self.bounds)])
        return float(np.linalg.norm(nearest - center)), sup


@dataclass(frozen=True, eq=False)
class Grid:
    domain: SpatialDomain
    T: float
    nodes: tuple
    k: float
    steps: int
    cfl: float

    @property
    def n(self):
        return self.domain.n

    @property
    def h(self):
        return tuple((hi - lo) / (N - 1) for (lo, hi), N in zip(self.domain.bounds, self.nodes))

    @property
    def h_min(self):
        return min(self.h)

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def axes(self):
        return [lo + h * np.arange(N) for (lo, _), h, N in zip(self.domain.bounds, self.h, self.nodes)]

    def mesh(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    @property
    def times(self):
        return -self.T + self.k * np.arange(self.steps + 1)

    @property
    def interior(self):
        return tuple(slice(1, N - 1) for N in self.nodes)

    @property
    def interior_shape(self):
        return tuple(N - 2 for N in self.nodes)

    def embed(self, interior_values):
        """Zero-extend interior node values to the full node array (trailing axes)."""
        interior_values = np.asarray(interior_values)
        lead = interior_values.shape[: interior_values.ndim - self.n]
        out = np.zeros(lead + tuple(self.nodes))
        out[(Ellipsis,) + self.interior] = interior_values
        return out

    def restrict(self, values):
        return np.asarray(values)[(Ellipsis,) + self.interior]

    def time_index(self, t):
        j = int(round((t + self.T) / self.k))
        if j < 0 or j > self.steps or abs(self.times[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a grid time level")
        return j


def build_grid(domain: SpatialDomain, T: float, resolution, k: float | None = None,
               cfl: float = 0.5) -> Grid:
    """Uniform grid over (-T, T) x domain; the time step obeys k <= cfl * h_min."""
    if T <= 0:
        raise ValueError("T must be positive")
    nodes = tuple(int(N) for N in np.broadcast_to(np.atleast_1d(resolution), (domain.n,)))
    if min(nodes) < 3:
        raise ValueError("need at least 3 nodes per axis")
    if cfl <= 0 or cfl > 1 / math.sqrt(domain.n):
        raise ValueError(f"CFL factor must lie in (0, 1/sqrt(n)], got {cfl}")
    h_min = min((hi - lo) / (N - 1) for (lo, hi), N in zip(domain.bounds, nodes))
    k_max = cfl * h_min
    if k is None:
        k = k_max
    elif k > k_max * (1 + 1e-12):
        warnings.warn(f"time step {k} violates the CFL bound; clamped to {k_max}", stacklevel=2)
        k = k_max
    steps = math.ceil(2 * T / k - 1e-9)
    return Grid(domain=domain, T=float(T), nodes=nodes, k=2 * T / steps, steps=steps, cfl=cfl)


# ---------------------------------------------------------------------------
# Masks


def trapezoid_weights(count, spacing):
    w = np.full(count, float(spacing))
    w[0] = w[-1] = spacing / 2
    return w


@dataclass(frozen=True, eq=False)
class RegionMask:
    fraction: np.ndarray
    spacings: tuple

    def __post_init__(self):
        frac = np.asarray(self.fraction, dtype=float)
        if frac.ndim != len(self.spacings):
            raise ValueError("one spacing per mask axis")
        if np.any(frac < 0) or np.any(frac > 1):
            raise ValueError("fractions must lie in [0, 1]")
        object.__setattr__(self, "fraction", frac)

    @property
    def nodes(self):
        return self.fraction > 0

    @property
    def shape(self):
        return self.fraction.shape

    def is_empty(self):
        return not np.any(self.fraction > 0)

    def __and__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.fraction * other.fraction, self.spacings)

    def union(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(np.maximum(self.fraction, other.fraction), self.spacings)

    def dilate(self, cells: int) -> "RegionMask":
        """Grow the node set by ``cells`` layers (max-norm neighbourhood); added nodes count fully."""
        if cells <= 0:
            return self
        from scipy.ndimage import binary_dilation
        structure = np.ones((3,) * self.fraction.ndim, dtype=bool)
        grown = binary_dilation(self.nodes, structure=structure, iterations=cells)
        added = grown & ~self.nodes
        return RegionMask(np.where(added, 1.0, self.fraction), self.spacings)

    def weights(self):
        """Trapezoid weight times cut-cell fraction at every node."""
        w = self.fraction.copy()
        for axis, (count, dx) in enumerate(zip(self.shape, self.spacings)):
            shape = [1] * w.ndim
            shape[axis] = count
            w = w * trapezoid_weights(count, dx).reshape(shape)
        return w

    def broadcast_space(self, lead_shape, lead_spacings) -> "RegionMask":
        """Extend a spatial mask to (time..., space) by repetition along new leading axes."""
        frac = np.broadcast_to(self.fraction, tuple(lead_shape) + self.shape)
        return RegionMask(np.array(frac), tuple(lead_spacings) + tuple(self.spacings))


@dataclass(frozen=True, eq=False)
class BoundaryMask(RegionMask):
    normals: np.ndarray = None


def outward_normals(grid: Grid):
    """Outward unit normal at every boundary node; corners take the normal of their axis-0 face."""
    normals = np.zeros(tuple(grid.nodes) + (grid.n,))
    for axis in reversed(range(grid.n)):
        for end, sign in ((0, -1.0), (-1, 1.0)):
            index = [slice(None)] * grid.n
            index[axis] = end
            normals[tuple(index)] = 0.0
            normals[tuple(index) + (axis,)] = sign
    return normals


def gamma_plus(grid: Grid, x0=None) -> BoundaryMask:
    """Boundary nodes where the outward normal points away from x0."""
    x0 = np.asarray(grid.domain.x0 if x0 is None else np.atleast_1d(x0), float)
    normals = outward_normals(grid)
    coords = np.stack(grid.mesh(), axis=-1)
    dot = np.sum(normals * (coords - x0), axis=-1)
    on_boundary = np.any(normals != 0, axis=-1)
    frac = (on_boundary & (dot > 0)).astype(float)
    return BoundaryMask(frac, grid.h, normals=normals)


def _cell_limits(coords, spacing, lo, hi):
    return np.maximum(coords - spacing / 2, lo), np.minimum(coords + spacing / 2, hi)


def _subcell_fraction(level, axes, spacings, limits, subsamples, max_candidates=2_000_000):
    """Fraction of each node's dual cell where ``level(*coords) > 0``.

    ``axes`` are 1D node coordinates, ``limits`` the (lo, hi) clip per axis.
    Only cells whose corners disagree in sign with the node are sub-sampled.
    """
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)
    node_val = level(*grids)
    inside = node_val > 0
    cell_lo, cell_hi = [], []
    for g, dx, (lo, hi) in zip(grids, spacings, limits):
        a, b = _cell_limits(g, dx, lo, hi)
        cell_lo.append(a)
        cell_hi.append(b)
    straddle = node_val == 0
    for corner in itertools.product((0, 1), repeat=len(axes)):
        pts = [cell_hi[i] if c else cell_lo[i] for i, c in enumerate(corner)]
        straddle = straddle | ((level(*pts) > 0) != inside)
    frac = inside.astype(float)
    idx = np.nonzero(straddle)
    count = idx[0].size
    if count == 0:
        return frac
    offsets = (np.arange(subsamples) + 0.5) / subsamples
    sub = np.stack(np.meshgrid(*([offsets] * len(axes)), indexing="ij"), -1).reshape(-1, len(axes))
    chunk = max(1, max_candidates // sub.shape[0])
    for start in range(0, count, chunk):
        sel = tuple(i[start:start + chunk] for i in idx)
        pts = []
        for axis in range(len(axes)):
            a = np.broadcast_to(cell_lo[axis], frac.shape)[sel]
            b = np.broadcast_to(cell_hi[axis], frac.shape)[sel]
            pts.append((a[:, None] + (b - a)[:, None] * sub[None, :, axis]).ravel())
        vals = level(*pts).reshape(-1, sub.shape[0])
        frac[sel] = np.mean(vals > 0, axis=1)
    return frac


def omega_region(grid: Grid, gamma_mask: RegionMask, sigma: float, subsamples: int = 8) -> RegionMask:
    """Nodes of the domain within distance sigma of the discrete Gamma_+ node set."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    coords = np.stack(grid.mesh(), axis=-1)
    sources = coords[gamma_mask.nodes]
    if sources.size == 0:
        warnings.warn("Gamma_+ is empty, so omega is empty", stacklevel=2)
        return RegionMask(np.zeros(tuple(grid.nodes)), grid.h)
    tree = cKDTree(sources)

    def level(*xs):
        shape = np.broadcast_shapes(*[np.shape(x) for x in xs])
        pts = np.stack([np.broadcast_to(x, shape).ravel() for x in xs], -1)
        dist, _ = tree.query(pts)
        return (sigma - dist).reshape(shape)

    frac = _subcell_fraction(level, grid.axes(), grid.h, grid.domain.bounds, subsamples)
    mask = RegionMask(frac, grid.h)
    if mask.is_empty():
        warnings.warn(f"omega is empty for sigma={sigma}", stacklevel=2)
    return mask


def cone_level(x0, time_dims):
    x0 = np.atleast_1d(np.asarray(x0, float))

    def level(*coords):
        ts, xs = coords[:time_dims], coords[time_dims:]
        out = sum((x - c) ** 2 for x, c in zip(xs, x0))
        return (out - sum(t * t for t in ts)) / 4
    return level


def cone_regions(grid: Grid, x0=None, time_dims: int = 1, times=None, fractions=None,
                 subsamples: int = 8) -> RegionMask:
    """Cone exterior {|x - x0|^2 > |t|^2} on (t, x) or (t1, t2, x) nodes."""
    if time_dims not in (1, 2):
        raise ValueError("time_dims must be 1 or 2")
    x0 = grid.domain.x0 if x0 is None else x0
    times = grid.times if times is None else np.asarray(times, float)
    dt = float(times[1] - times[0]) if times.size > 1 else grid.k
    if fractions is None:
        fractions = time_dims == 1
    axes = [times] * time_dims + grid.axes()
    spacings = (dt,) * time_dims + tuple(grid.h)
    level = cone_level(x0, time_dims)
    if fractions:
        tlim = (float(times[0]), float(times[-1]))
        frac = _subcell_fraction(level, axes, spacings, [tlim] * time_dims + list(grid.domain.bounds),
                                 subsamples)
    else:
        frac = (level(*np.meshgrid(*axes, indexing="ij", sparse=True)) > 0).astype(float)
    return RegionMask(frac, spacings)


def integrate(values, mask: RegionMask, grid: Grid | None = None) -> float:
    """Tensor-product trapezoid rule weighted by the mask fractions."""
    values = np.broadcast_to(np.asarray(values, dtype=float), mask.shape)
    active = mask.nodes
    bad = active & ~np.isfinite(values)
    if np.any(bad):
        loc = tuple(int(i[0]) for i in np.nonzero(bad))
        raise FloatingPointError(f"non-finite integrand at node {loc}")
    w = mask.weights()
    return float(np.sum(np.where(active, values, 0.0) * w))


# ---------------------------------------------------------------------------
# Dirichlet Poisson problem and the H^-1 norm


def _second_difference(count, spacing):
    main = np.full(count, 2.0 / spacing**2)
    off = np.full(count - 1, -1.0 / spacing**2)
    return sp.diags([off, main, off], [-1, 0, 1], format="csc")


class PoissonSolver:
    """Discrete -Laplacian with homogeneous Dirichlet data on the interior nodes."""

    def __init__(self, nodes, spacings):
        shape = tuple(N - 2 for N in nodes)
        self.shape = shape
        self.spacings = tuple(spacings)
        self.cell_volume = float(np.prod(spacings))
        ops = [_second_difference(c, h) for c, h in zip(shape, spacings)]
        if len(ops) == 1:
            A = ops[0]
        else:
            ix, iy = sp.identity(shape[0], format="csc"), sp.identity(shape[1], format="csc")
            A = sp.kron(ops[0], iy) + sp.kron(ix, ops[1])
        self.matrix = A.tocsc()
        self._lu = spla.splu(self.matrix)

    def _columns(self, values):
        values = np.asarray(values, dtype=float)
        lead = values.shape[: values.ndim - len(self.shape)]
        return values.reshape((-1, int(np.prod(self.shape)))).T, lead

    def solve(self, rhs):
        cols, lead = self._columns(rhs)
        sol = self._lu.solve(np.ascontiguousarray(cols))
        resid = self.matrix @ sol - cols
        scale = np.max(np.abs(cols)) if cols.size else 0.0
        if scale > 0 and np.max(np.abs(resid)) > 1e-10 * scale:
            raise ArithmeticError("Poisson solve did not reach the residual tolerance")
        return sol.T.reshape(lead + self.shape)

    def apply(self, w):
        cols, lead = self._columns(w)
        return (self.matrix @ cols).T.reshape(lead + self.shape)

    def dual_norm_sq(self, phi):
        """||grad w||^2 with -Lap w = phi; equals the cell-volume-weighted <w, phi> by summation by parts."""
        w = self.solve(phi)
        axes = tuple(range(-len(self.shape), 0))
        return self.cell_volume * np.sum(w * np.asarray(phi), axis=axes)

    def grad_norm_sq(self, w):
        """Discrete Dirichlet energy of interior values (boundary values zero)."""
        w = np.asarray(w, dtype=float)
        total = 0.0
        axes0 = w.ndim - len(self.shape)
        padded = np.pad(w, [(0, 0)] * axes0 + [(1, 1)] * len(self.shape))
        for i, h in enumerate(self.spacings):
            d = np.diff(padded, axis=axes0 + i) / h
            total = total + np.sum(d * d, axis=tuple(range(axes0, w.ndim)))
        return self.cell_volume * total


@functools.lru_cache(maxsize=32)
def _cached_poisson(nodes, spacings):
    return PoissonSolver(nodes, spacings)


def poisson_solver(grid: Grid) -> PoissonSolver:
    return _cached_poisson(tuple(grid.nodes), tuple(grid.h))


def h_minus1_norm(field, grid: Grid):
    """H^-1 norm of a spatial field given on all nodes (boundary values ignored) or on the interior."""
    field = np.asarray(field, dtype=float)
    if field.shape[-grid.n:] == tuple(grid.nodes):
        field = grid.restrict(field)
    return np.sqrt(np.maximum(poisson_solver(grid).dual_norm_sq(field), 0.0))


def l2_norm(field, grid: Grid):
    """Trapezoid L^2 norm over the spatial nodes (trailing axes)."""
    field = np.asarray(field, dtype=float)
    if field.shape[-grid.n:] != tuple(grid.nodes):
        field = grid.embed(field)
    w = RegionMask(np.ones(tuple(grid.nodes)), grid.h).weights()
    axes = tuple(range(-grid.n, 0))
    return np.sqrt(np.sum(w * field * field, axis=axes))


# ---------------------------------------------------------------------------
# Difference stencils on node arrays


def diff1(values, axis, spacing):
    """First derivative: central inside, second-order one-sided at the ends."""
    return np.gradient(values, spacing, axis=axis, edge_order=2)


def diff2(values, axis, spacing):
    """Second derivative: three-point inside, four-point one-sided at the ends."""
    a = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    out = np.empty_like(a)
    out[1:-1] = a[2:] - 2 * a[1:-1] + a[:-2]
    out[0] = 2 * a[0] - 5 * a[1] + 4 * a[2] - a[3]
    out[-1] = 2 * a[-1] - 5 * a[-2] + 4 * a[-3] - a[-4]
    return np.moveaxis(out / spacing**2, 0, axis)
