"""Observability constants for the adjoint system on cone-restricted observation regions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .mesh import (Grid, RegionMask, SpatialDomain, build_grid, cone_regions, gamma_plus, l2_norm,
                   omega_region, poisson_solver)
from .wave import Coefficients, leapfrog_operator, solve_adjoint


@dataclass(frozen=True, eq=False)
class ObservationSetup:
    mode: str
    centers: tuple
    sigma: float
    T: float
    grid: Grid
    R_plus: float
    R_minus: float
    W: RegionMask
    margin: float = 0.0
    allow_short_time: bool = False

    @property
    def domain(self) -> SpatialDomain:
        return self.grid.domain

    def at_resolution(self, nodes) -> "ObservationSetup":
        """Same configuration rebuilt on a grid with ``nodes`` nodes per axis."""
        grid = build_grid(self.domain, self.T, nodes, cfl=self.grid.cfl)
        return make_setup(self.domain, self.mode, self.centers, self.sigma, self.T, grid,
                          margin=self.margin, allow_short_time=self.allow_short_time)


def _observation_piece(grid: Grid, x0, sigma):
    omega = omega_region(grid, gamma_plus(grid, x0), sigma)
    cone = cone_regions(grid, x0, time_dims=1)
    return omega.broadcast_space((grid.steps + 1,), (grid.k,)) & cone


def make_setup(domain: SpatialDomain, mode: str, centers, sigma: float, T: float, grid: Grid | None = None,
               resolution=101, dilation: int = 2, margin: float | None = None,
               allow_short_time: bool = False) -> ObservationSetup:
    """Observation region W and the radii R_+, R_- for the exterior or the two-point interior setting.

    Exterior: ``centers`` is x0 (outside the closed domain).  Interior: ``centers`` is a pair of
    space-time points (0, x1), (0, x2); W is the union of both cone-restricted collars grown by a
    physical ``margin`` (default: ``dilation`` cells of this grid), kept fixed under refinement.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if grid is None:
        grid = build_grid(domain, T, resolution)
    elif grid.domain != domain or abs(grid.T - T) > 1e-12:
        raise ValueError("grid does not match the domain and time horizon")
    if mode == "exterior":
        x0 = tuple(float(c) for c in np.atleast_1d(centers))
        if len(x0) != domain.n:
            raise ValueError("x0 must have one entry per axis")
        if domain.contains_closure(x0):
            raise ValueError("exterior mode needs x0 outside the closed domain")
        R_minus, R_plus = domain.radius_range(x0)
        W = _observation_piece(grid, x0, sigma)
        centers = x0
        margin = 0.0
    elif mode == "interior":
        pts = [tuple(float(c) for c in np.atleast_1d(p)) for p in centers]
        if len(pts) != 2 or any(len(p) != 1 + domain.n for p in pts):
            raise ValueError("interior mode needs two points (t, x...)")
        if any(p[0] != 0 for p in pts):
            raise ValueError("interior centers must have t = 0")
        xs = [np.array(p[1:]) for p in pts]
        R_minus = 0.5 * float(np.linalg.norm(xs[1] - xs[0]))
        if R_minus <= 0:
            raise ValueError("interior centers must differ")
        R_plus = max(domain.radius_range(x)[1] for x in xs)
        W = _observation_piece(grid, xs[0], sigma).union(_observation_piece(grid, xs[1], sigma))
        margin = dilation * grid.h_min if margin is None else float(margin)
        W = W.dilate(int(round(margin / grid.h_min)))
        centers = tuple(pts)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if T <= R_plus and not allow_short_time:
        raise ValueError(f"T={T} must exceed R_+={R_plus:.6g}")
    return ObservationSetup(mode, centers, float(sigma), float(T), grid, float(R_plus), float(R_minus),
                            W, margin, allow_short_time)


def full_cylinder(setup: ObservationSetup) -> RegionMask:
    grid = setup.grid
    return RegionMask(np.ones((grid.steps + 1,) + tuple(grid.nodes)), (grid.k,) + tuple(grid.h))


def initial_energy(phi0, phi1, grid: Grid) -> float:
    """||phi0||^2_{L^2} + ||phi1||^2_{H^-1}."""
    phi1 = np.asarray(phi1, float)
    if phi1.shape == tuple(grid.nodes):
        phi1 = grid.restrict(phi1)
    return float(l2_norm(phi0, grid) ** 2 + poisson_solver(grid).dual_norm_sq(phi1))


def observed_mass(levels, W: RegionMask) -> float:
    return float(np.sum(W.weights() * np.asarray(levels) ** 2))


def observability_ratio(setup: ObservationSetup, coeffs: Coefficients, data, W: RegionMask | None = None) -> float:
    """Initial energy over the observed L^2 mass on W; +inf when nothing is observed."""
    W = setup.W if W is None else W
    traj = solve_adjoint(coeffs, data, setup.grid)
    num = initial_energy(traj.values[0], traj.initial_velocity, setup.grid)
    den = observed_mass(traj.values, W)
    if num == 0:
        raise ValueError("data must be nonzero")
    if den <= 0:
        warnings.warn(f"observed mass is zero on W (initial energy {num:.3e}); ratio is infinite",
                      stacklevel=2)
        return float("inf")
    return num / den


# ---------------------------------------------------------------------------
# Ensemble estimates on a low-mode subspace


def mode_basis(grid: Grid, modes: int):
    """Dirichlet sine modes: (profile, eigen-frequency) pairs, product modes in 2D."""
    axes = []
    for (lo, hi), x in zip(grid.domain.bounds, grid.axes()):
        axes.append([(np.sin(j * np.pi * (x - lo) / (hi - lo)), j * np.pi / (hi - lo))
                     for j in range(1, modes + 1)])
    if grid.n == 1:
        return axes[0]
    pairs = sorted(((i, j) for i in range(modes) for j in range(modes)),
                   key=lambda ij: axes[0][ij[0]][1] ** 2 + axes[1][ij[1]][1] ** 2)[:modes]
    return [(np.outer(axes[0][i][0], axes[1][j][0]), float(np.hypot(axes[0][i][1], axes[1][j][1])))
            for i, j in pairs]


@dataclass(frozen=True, eq=False)
class SubspaceForms:
    """Energy and observation quadratic forms on the span of (mode, 0) and (0, freq * mode)."""
    energy: np.ndarray
    observation: np.ndarray
    data: list


def subspace_forms(setup: ObservationSetup, coeffs: Coefficients, modes: int, W: RegionMask | None = None):
    W = setup.W if W is None else W
    grid = setup.grid
    basis = mode_basis(grid, modes)
    zero = np.zeros(tuple(grid.nodes))
    data = [(b, zero) for b, _ in basis] + [(zero, w * b) for b, w in basis]
    op = leapfrog_operator(coeffs, grid)
    weights = W.weights()[(slice(None),) + grid.interior]
    levels = np.stack([op.adjoint_levels(grid.restrict(d0), grid.restrict(d1)) for d0, d1 in data])
    flat = levels.reshape(len(data), -1)
    observation = (flat * weights.reshape(1, -1)) @ flat.T
    vol = grid.cell_volume
    p0 = np.stack([grid.restrict(d0).ravel() for d0, _ in data])
    p1 = np.stack([grid.restrict(d1) for _, d1 in data])
    w1 = poisson_solver(grid).solve(p1).reshape(len(data), -1)
    energy = vol * (p0 @ p0.T + w1 @ p1.reshape(len(data), -1).T)
    energy = 0.5 * (energy + energy.T)
    observation = 0.5 * (observation + observation.T)
    return SubspaceForms(energy, observation, data)


@dataclass(frozen=True)
class PowerResult:
    value: float
    iterations: int
    converged: bool


def power_iteration(energy, observation, start, max_iter: int = 500, tol: float = 1e-10) -> PowerResult:
    """Largest value of the quotient <Ec, c>/<Qc, c> by power steps on Q^{-1}E from ``start``."""
    try:
        chol = sla.cho_factor(observation)
    except np.linalg.LinAlgError:
        return PowerResult(float("inf"), 0, True)
    c = np.asarray(start, float)
    value = float(c @ energy @ c / (c @ observation @ c))
    for it in range(1, max_iter + 1):
        c = sla.cho_solve(chol, energy @ c)
        c = c / np.sqrt(c @ observation @ c)
        new = float(c @ energy @ c)
        if abs(new - value) <= tol * abs(new):
            return PowerResult(new, it, True)
        value = new
    return PowerResult(value, max_iter, False)


@dataclass(frozen=True, eq=False)
class LevelEstimate:
    nodes: int
    ratios: np.ndarray
    max_ratio: float
    power: PowerResult

    @property
    def estimate(self):
        return max(self.max_ratio, self.power.value)


@dataclass(frozen=True, eq=False)
class ObservabilityReport:
    levels: list = field(default_factory=list)

    @property
    def estimates(self):
        return [lv.estimate for lv in self.levels]

    @property
    def refinement_deltas(self):
        e = self.estimates
        return [abs(b - a) / a for a, b in zip(e[:-1], e[1:])]

    @property
    def flagged(self):
        return any(not lv.power.converged for lv in self.levels)

    @property
    def max_ratio(self):
        return self.levels[-1].max_ratio


def _ensemble_coefficients(size, dim, seed):
    return np.random.default_rng(seed).standard_normal((size, dim))


def _level_estimate(setup, coeffs, coeff_samples, modes, power_cap, W=None):
    forms = subspace_forms(setup, coeffs, modes, W)
    E, Q = forms.energy, forms.observation
    num = np.einsum("si,ij,sj->s", coeff_samples, E, coeff_samples)
    den = np.einsum("si,ij,sj->s", coeff_samples, Q, coeff_samples)
    with np.errstate(divide="ignore"):
        ratios = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    best = int(np.argmax(ratios))
    if np.isfinite(ratios[best]):
        power = power_iteration(E, Q, coeff_samples[best], max_iter=power_cap)
    else:
        power = PowerResult(float("inf"), 0, True)
    return LevelEstimate(int(setup.grid.nodes[0]), ratios, float(np.max(ratios)), power)


def estimate_constant(setup: ObservationSetup, coeffs: Coefficients, ensemble_size: int = 50,
                      refinement_levels=None, seed: int = 0, modes: int = 10,
                      power_cap: int = 500, min_ensemble: int = 10) -> ObservabilityReport:
    """Max ratio over a seeded random low-mode ensemble plus a power-iteration refinement, per level.

    Samples are combinations of the first ``modes`` Dirichlet modes for phi0 and for phi1 (the latter
    scaled by the mode frequency); the same coefficients are used at every level.
    """
    if ensemble_size < min_ensemble:
        raise ValueError(f"ensemble_size must be at least {min_ensemble}")
    levels = refinement_levels or [setup.grid.nodes[0]]
    samples = _ensemble_coefficients(ensemble_size, 2 * modes, seed)
    report = []
    for nodes in levels:
        level_setup = setup if nodes == setup.grid.nodes[0] else setup.at_resolution(nodes)
        report.append(_level_estimate(level_setup, coeffs, samples, modes, power_cap))
    return ObservabilityReport(report)


def sample_data(setup: ObservationSetup, coefficients, modes: int):
    """Initial data (phi0, phi1) for one coefficient vector of the ensemble."""
    basis = mode_basis(setup.grid, modes)
    c = np.asarray(coefficients, float)
    phi0 = sum(ci * b for ci, (b, _) in zip(c[:modes], basis))
    phi1 = sum(ci * w * b for ci, (b, w) in zip(c[modes:], basis))
    return phi0, phi1


@dataclass(frozen=True, eq=False)
class ProbeReport:
    nodes: list
    modes: list
    estimates: list

    @property
    def growth(self):
        first, last = self.estimates[0], self.estimates[-1]
        if not np.isfinite(first):
            return float("nan")
        return last / first

    @property
    def infinite(self):
        return any(not np.isfinite(e) for e in self.estimates)


def negative_probe(setup: ObservationSetup, coeffs: Coefficients, refinement_levels=(51, 101, 201),
                   ensemble_size: int = 50, seed: int = 0, mode_divisor: int = 25) -> ProbeReport:
    """Observability estimates under refinement for a setup violating T > R_+ (or with empty omega).

    The resolved mode budget grows with the grid, (nodes - 1) // mode_divisor, so unobservable
    high-frequency content becomes visible as the grid refines.
    """
    if setup.T > setup.R_plus and not setup.W.is_empty():
        raise ValueError("the probe needs T <= R_+ or an empty observation region")
    nodes_used, modes_used, estimates = [], [], []
    rng_seed = seed
    for nodes in refinement_levels:
        level_setup = setup if nodes == setup.grid.nodes[0] else setup.at_resolution(nodes)
        modes = max(1, (int(nodes) - 1) // mode_divisor)
        samples = _ensemble_coefficients(ensemble_size, 2 * modes, rng_seed)
        if level_setup.W.is_empty():
            est = float("inf")
        else:
            est = _level_estimate(level_setup, coeffs, samples, modes, power_cap=2000).estimate
        nodes_used.append(int(nodes))
        modes_used.append(modes)
        estimates.append(est)
    return ProbeReport(nodes_used, modes_used, estimates)
