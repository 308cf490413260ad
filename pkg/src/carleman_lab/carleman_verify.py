"""Both sides of the weighted (boundary and interior) Carleman inequalities for two-time fields.

Fields z(t1, t2, x) live on a square time grid times the spatial nodes of a grid.  The
weight is centred at (t, x) = (0, x0); tau = |(t1, t2)|, r = |x - x0|, f = (r^2 - tau^2)/4.
All integrals are multiplied by exp(-log_shift), with log_shift the largest log-weight on
the active region, so values stay in floating-point range; ratios are unaffected.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CarlemanParams, Dimensions, SpacetimePoint, log_carleman_weight
from .mesh import BoundaryMask, Grid, RegionMask, diff1, diff2, gamma_plus, omega_region, trapezoid_weights
from .wave import TwoTimeField

TIME_DIMS = 2


@dataclass(frozen=True)
class CarlemanReport:
    lhs_first_order: float
    lhs_zeroth: float
    rhs_bulk: float
    rhs_terms: dict = field(default_factory=dict)
    form: str = "interior"
    log_shift: float = 0.0

    @property
    def lhs_total(self):
        return self.lhs_first_order + self.lhs_zeroth

    @property
    def rhs_total(self):
        return self.rhs_bulk + sum(self.rhs_terms.values())

    @property
    def empirical_ratio(self):
        if self.lhs_total == 0:
            return float("nan") if self.rhs_total == 0 else float("inf")
        return self.rhs_total / self.lhs_total

    def entries(self):
        out = {"lhs_first_order": self.lhs_first_order, "lhs_zeroth": self.lhs_zeroth,
               "rhs_bulk": self.rhs_bulk}
        out.update(self.rhs_terms)
        out["empirical_ratio"] = self.empirical_ratio
        return out


@dataclass(frozen=True, eq=False)
class CarlemanMasks:
    """Active two-time region, spatial observation collar and boundary faces."""
    region: RegionMask
    omega: RegionMask
    gamma: BoundaryMask
    times: np.ndarray
    exclusion: float
    cache: dict = field(default_factory=dict, repr=False)


def default_params(R: float, delta: float = 0.1, a: float | None = None, b: float | None = None,
                   epsilon: float | None = None) -> CarlemanParams:
    """Parameters tied to delta (epsilon = delta^2/R, b = delta/R, a = max(9, ceil(20 R))) with overrides."""
    base = CarlemanParams.from_delta(R, Dimensions(TIME_DIMS, 1), delta=delta, a=a)
    return CarlemanParams(a=base.a, b=base.b if b is None else float(b),
                          epsilon=base.epsilon if epsilon is None else float(epsilon), R=base.R, dims=base.dims)


def two_time_axis(R: float, spacing: float):
    count = int(round(2 * R / spacing))
    return np.linspace(-R, R, count + 1)


def carleman_masks(grid: Grid, times, sigma: float = 0.3, exclusion: float | None = None) -> CarlemanMasks:
    """Node masks on (t1, t2, x): cone exterior with tau >= exclusion, omega collar and Gamma_+ faces."""
    times = np.asarray(times, float)
    dt = float(times[1] - times[0])
    exclusion = dt if exclusion is None else exclusion
    geo = _geometry(grid, times)
    active = (geo["f"] > 0) & (geo["tau"] >= exclusion)
    region = RegionMask(active.astype(float), (dt, dt) + tuple(grid.h))
    gamma = gamma_plus(grid)
    omega = omega_region(grid, gamma, sigma).broadcast_space((times.size,) * 2, (dt, dt)) & region
    return CarlemanMasks(region, omega, gamma, times, exclusion)


def _geometry(grid: Grid, times, rows=slice(None)):
    t1 = times[rows].reshape((-1, 1) + (1,) * grid.n)
    t2 = times.reshape((1, -1) + (1,) * grid.n)
    xs = [x[None, None] for x in grid.mesh()]
    x0 = grid.domain.x0
    rel = [x - c for x, c in zip(xs, x0)]
    r = np.sqrt(sum(d * d for d in rel))
    tau = np.sqrt(t1 * t1 + t2 * t2)
    return {"t": (t1, t2), "rel": rel, "r": r, "tau": tau, "f": (r * r - tau * tau) / 4,
            "u": (tau - r) / 2, "v": (tau + r) / 2}


def _log_weight(geo, params: CarlemanParams):
    t = np.stack(np.broadcast_arrays(*geo["t"], geo["f"])[:2], axis=-1)
    x = np.stack(np.broadcast_arrays(*geo["rel"], geo["f"])[:-1], axis=-1)
    return log_carleman_weight(SpacetimePoint(t, x), None, params)


def _densities(geo, grad_t, grad_x):
    """Pointwise first-order density pieces from Cartesian gradients."""
    tau, r, f, u, v = geo["tau"], geo["r"], geo["f"], geo["u"], geo["v"]
    with np.errstate(divide="ignore", invalid="ignore"):
        d_tau = sum(t * g for t, g in zip(geo["t"], grad_t)) / tau
        d_r = sum(x * g for x, g in zip(geo["rel"], grad_x)) / r
    d_u = d_tau - d_r
    d_v = d_tau + d_r
    grad_t_sq = sum(g * g for g in grad_t)
    grad_x_sq = sum(g * g for g in grad_x)
    return {"u_du_sq": (u * d_u) ** 2, "v_dv_sq": (v * d_v) ** 2,
            "spatial_angular": f * (grad_x_sq - d_r**2),
            "temporal_angular": f * (grad_t_sq - d_tau**2),
            "grad_t_sq": grad_t_sq}


def first_order_density(z: TwoTimeField, index=None):
    """Density pieces of the first-order left-hand side at every node, or at one (i1, i2, *ix) node."""
    grid = z.grid
    dt = z.dt
    geo = _geometry(grid, z.times)
    grad_t = [diff1(z.values, 0, dt), diff1(z.values, 1, dt)]
    grad_x = [diff1(z.values, 2 + a, h) for a, h in enumerate(grid.h)]
    dens = _densities(geo, grad_t, grad_x)
    dens.pop("grad_t_sq")
    dens = {k: np.broadcast_to(v, z.values.shape) for k, v in dens.items()}
    if index is not None:
        return {k: float(v[tuple(index)]) for k, v in dens.items()}
    return dens


def _row_blocks(count, chunk):
    for start in range(0, count, chunk):
        stop = min(start + chunk, count)
        hi = min(count, stop + 2)
        lo = max(0, min(start - 2, hi - 4))
        yield start, stop, lo, hi


def _weights(masks: CarlemanMasks, grid: Grid, params: CarlemanParams):
    """(log_shift, weight / exp(log_shift) on active nodes, zero elsewhere); cached per parameter set."""
    key = (params.a, params.b, params.epsilon, params.R)
    if key not in masks.cache:
        geo = _geometry(grid, masks.times)
        active = masks.region.nodes
        logw = np.where(active, _log_weight(geo, params), -np.inf)
        shift = float(np.max(logw)) if np.any(active) else 0.0
        masks.cache.clear()
        masks.cache[key] = (shift, np.exp(logw - shift))
    return masks.cache[key]


def _volume_sides(z: TwoTimeField, params, masks: CarlemanMasks, f_cut, chunk, weights, with_omega):
    grid = z.grid
    dt = z.dt
    Z = z.values
    eps, a, b, R = params.epsilon, params.a, params.b, params.R
    w_region = masks.region.weights()
    w_omega = masks.omega.weights()
    totals = dict(lhs_first_order=0.0, lhs_zeroth=0.0, rhs_bulk=0.0, omega_gradient=0.0, omega_zeroth=0.0)
    n1 = Z.shape[0]
    for start, stop, lo, hi in _row_blocks(n1, chunk):
        block = Z[lo:hi]
        keep = slice(start - lo, stop - lo)
        geo = _geometry(grid, masks.times, slice(start, stop))
        grad_t = [diff1(block, 0, dt)[keep], diff1(block, 1, dt)[keep]]
        grad_x = [diff1(block, 2 + i, h)[keep] for i, h in enumerate(grid.h)]
        box = -diff2(block, 0, dt)[keep] - diff2(block, 1, dt)[keep]
        for i, h in enumerate(grid.h):
            box = box + diff2(block, 2 + i, h)[keep]
        zc = block[keep]
        active = masks.region.nodes[start:stop]
        if f_cut > 0:
            active = active & (geo["f"] >= f_cut)
        f = np.where(active, geo["f"], 1.0)
        r = geo["r"]
        weight = np.where(active, weights[start:stop], 0.0)
        dens = _densities(geo, grad_t, grad_x)
        first = dens["u_du_sq"] + dens["v_dv_sq"] + dens["spatial_angular"] + dens["temporal_angular"]
        wr = w_region[start:stop]

        def total(values, w=wr):
            vals = np.where(active, values, 0.0)
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError("non-finite Carleman integrand")
            return float(np.sum(vals * w))

        totals["lhs_first_order"] += eps * total(weight * first / r)
        totals["lhs_zeroth"] += b * a**2 * total(weight * zc**2 / np.sqrt(f))
        totals["rhs_bulk"] += total(weight * f * box**2) / a
        if with_omega:
            wo = w_omega[start:stop]
            totals["omega_gradient"] += a**2 * R**3 * total(weight * dens["grad_t_sq"] / f**2, wo)
            totals["omega_zeroth"] += a**4 * R**4 * total(weight * zc**2 / f**3, wo)
    return totals


def _boundary_terms(z: TwoTimeField, params, masks: CarlemanMasks, weights):
    """Signed boundary integrals over R^2 x dOmega, split into Gamma_+ and Gamma_- faces."""
    grid = z.grid
    eps = params.epsilon
    normals = masks.gamma.normals
    on_boundary = np.any(normals != 0, axis=-1)
    geo = _geometry(grid, masks.times)
    normal_dz = sum(normals[..., i] * diff1(z.values, 2 + i, h) for i, h in enumerate(grid.h))
    nu_dot = sum(normals[..., i] * rel for i, rel in enumerate(geo["rel"]))
    r, f = geo["r"], geo["f"]
    N_f = nu_dot / 2
    N_r = nu_dot / r
    factor = (1 - eps * r) * N_f + eps * f * N_r
    active = masks.region.nodes & on_boundary
    weight = np.where(active, weights, 0.0)
    dt = float(masks.times[1] - masks.times[0])
    tw = trapezoid_weights(masks.times.size, dt)
    surface = np.ones(tuple(grid.nodes))
    if grid.n == 2:
        # face measure along the tangential axis; corners belong to the axis-0 faces
        axis0_face = normals[..., 0] != 0
        surface = np.where(axis0_face, trapezoid_weights(grid.nodes[1], grid.h[1])[None, :],
                           trapezoid_weights(grid.nodes[0], grid.h[0])[:, None])
    w = tw[:, None, None] * tw[None, :, None]
    w = w.reshape((tw.size, tw.size) + (1,) * grid.n) * surface
    integrand = np.where(active, weight * factor * normal_dz**2, 0.0)
    if not np.all(np.isfinite(integrand)):
        raise FloatingPointError("non-finite boundary integrand")
    plus = masks.gamma.nodes
    minus = on_boundary & ~plus
    return {"boundary_gamma_plus": float(np.sum(np.where(plus, integrand, 0.0) * w)),
            "boundary_gamma_minus": float(np.sum(np.where(minus, integrand, 0.0) * w))}


def _check_inputs(z: TwoTimeField, params: CarlemanParams, masks: CarlemanMasks):
    params.check_regime()
    if z.values.shape != masks.region.shape:
        raise ValueError("field and masks live on different grids")
    if masks.region.is_empty():
        raise ValueError("the active cone-exterior region is empty")
    edge = z.values.copy()
    edge[(slice(None), slice(None)) + z.grid.interior] = 0.0
    if np.max(np.abs(edge)) > 1e-12 * max(1.0, float(np.max(np.abs(z.values)))):
        raise ValueError("z must vanish on the spatial boundary")


def interior_sides(z: TwoTimeField, params: CarlemanParams, masks: CarlemanMasks,
                   f_cut: float = 0.0, chunk: int = 32) -> CarlemanReport:
    """Left side over the cone exterior; right side = bulk term plus the two omega terms."""
    _check_inputs(z, params, masks)
    if masks.omega.is_empty():
        raise ValueError("the omega region is empty")
    shift, weights = _weights(masks, z.grid, params)
    t = _volume_sides(z, params, masks, f_cut, chunk, weights, with_omega=True)
    return CarlemanReport(t["lhs_first_order"], t["lhs_zeroth"], t["rhs_bulk"],
                          {"omega_gradient": t["omega_gradient"], "omega_zeroth": t["omega_zeroth"]},
                          "interior", shift)


def boundary_sides(z: TwoTimeField, params: CarlemanParams, masks: CarlemanMasks,
                   f_cut: float = 0.0, chunk: int = 32) -> CarlemanReport:
    """Left side over the cone exterior; right side = bulk term plus the signed boundary terms."""
    _check_inputs(z, params, masks)
    shift, weights = _weights(masks, z.grid, params)
    t = _volume_sides(z, params, masks, f_cut, chunk, weights, with_omega=False)
    terms = _boundary_terms(z, params, masks, weights)
    return CarlemanReport(t["lhs_first_order"], t["lhs_zeroth"], t["rhs_bulk"], terms, "boundary", shift)


def both_sides(z: TwoTimeField, params: CarlemanParams, masks: CarlemanMasks,
               f_cut: float = 0.0, chunk: int = 32):
    """(interior report, boundary report) sharing one pass over the volume terms."""
    _check_inputs(z, params, masks)
    if masks.omega.is_empty():
        raise ValueError("the omega region is empty")
    shift, weights = _weights(masks, z.grid, params)
    t = _volume_sides(z, params, masks, f_cut, chunk, weights, with_omega=True)
    interior = CarlemanReport(t["lhs_first_order"], t["lhs_zeroth"], t["rhs_bulk"],
                              {"omega_gradient": t["omega_gradient"], "omega_zeroth": t["omega_zeroth"]},
                              "interior", shift)
    boundary = CarlemanReport(t["lhs_first_order"], t["lhs_zeroth"], t["rhs_bulk"],
                              _boundary_terms(z, params, masks, weights), "boundary", shift)
    return interior, boundary


def _ratio(report, i):
    if report.lhs_total <= 0:
        raise ValueError(f"family member {i} has zero left-hand side")
    return report.empirical_ratio


def empirical_constant(z_family, params: CarlemanParams, masks: CarlemanMasks, form: str = "interior",
                       min_size: int = 5):
    """Smallest right/left ratio over a family of fields: the calibrated admissible constant."""
    if len(z_family) < min_size:
        raise ValueError(f"need at least {min_size} fields, got {len(z_family)}")
    sides = {"interior": interior_sides, "boundary": boundary_sides}[form]
    return float(min(_ratio(sides(z, params, masks), i) for i, z in enumerate(z_family)))


def family_ratios(z_family, params: CarlemanParams, masks: CarlemanMasks):
    """Per-member ratios of both forms, one volume pass per field."""
    out = {"interior": [], "boundary": []}
    for i, z in enumerate(z_family):
        interior, boundary = both_sides(z, params, masks)
        out["interior"].append(_ratio(interior, i))
        out["boundary"].append(_ratio(boundary, i))
    return out


# ---------------------------------------------------------------------------
# Test families


def bump_field(grid: Grid, times, coeffs, freqs, phases, cone_power: int = 0) -> TwoTimeField:
    """sum_j c_j sin(j pi s(x)) * cos(w1 t1 + p1) cos(w2 t2 + p2) (* f^cone_power), s the unit coordinate."""
    times = np.asarray(times, float)
    t1 = times.reshape((-1, 1) + (1,) * grid.n)
    t2 = times.reshape((1, -1) + (1,) * grid.n)
    bump = np.ones(tuple(grid.nodes))
    for axis, ((lo, hi), x) in enumerate(zip(grid.domain.bounds, grid.mesh())):
        s = (x - lo) / (hi - lo)
        modes = sum(c * np.sin((j + 1) * np.pi * s) for j, c in enumerate(coeffs))
        bump = bump * modes
    for sl in [(slice(None),) * a + (e,) for a in range(grid.n) for e in (0, -1)]:
        bump[sl] = 0.0
    values = bump[None, None] * np.cos(freqs[0] * t1 + phases[0]) * np.cos(freqs[1] * t2 + phases[1])
    if cone_power:
        geo = _geometry(grid, times)
        values = values * geo["f"] ** cone_power
    return TwoTimeField(values, times, grid)


def random_bump_family(grid: Grid, times, count: int, rng: np.random.Generator):
    out = []
    for _ in range(count):
        coeffs = rng.uniform(-1, 1, 3)
        coeffs[0] = np.sign(coeffs[0] or 1.0) * max(abs(coeffs[0]), 0.5)
        out.append(bump_field(grid, times, coeffs, rng.uniform(0.5, 2.0, 2), rng.uniform(0, 2 * np.pi, 2)))
    return out


def trajectory_family(grid: Grid, times, count: int, rng: np.random.Generator,
                      presets=("zero", "timedep")):
    """Two-time lifts of adjoint solutions with random low-mode data, sampled on ``times``."""
    from .wave import build_z, preset, solve_adjoint
    times = np.asarray(times, float)
    if abs(times[0] + grid.T) > 1e-12 or abs(times[-1] - grid.T) > 1e-12:
        raise ValueError("the two-time axis must span the grid's time interval")
    stride = int(round((times[1] - times[0]) / grid.k))
    if abs(stride * grid.k - (times[1] - times[0])) > 1e-12:
        raise ValueError("the two-time spacing must be a multiple of the time step")
    lo, hi = grid.domain.bounds[0]
    s = (grid.axes()[0] - lo) / (hi - lo)
    out = []
    for i in range(count):
        c0, c1 = rng.uniform(-1, 1, (2, 3))
        modes = [np.sin((j + 1) * np.pi * s) for j in range(3)]
        phi0 = sum(c * m for c, m in zip(c0, modes))
        phi1 = sum(c * (j + 1) * np.pi * m for j, (c, m) in enumerate(zip(c1, modes)))
        if grid.n == 2:
            lo2, hi2 = grid.domain.bounds[1]
            ybump = np.sin(np.pi * (grid.axes()[1] - lo2) / (hi2 - lo2))
            phi0, phi1 = np.outer(phi0, ybump), np.outer(phi1, ybump)
        traj = solve_adjoint(preset(presets[i % len(presets)]), (phi0, phi1), grid)
        out.append(build_z(traj, stride=stride))
    return out


def verification_family(grid: Grid, times, seed: int = 0, bumps: int = 10, lifts: int = 10):
    rng = np.random.default_rng(seed)
    return random_bump_family(grid, times, bumps, rng) + trajectory_family(grid, times, lifts, rng)
