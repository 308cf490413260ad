"""Explicit leapfrog solvers for the adjoint and the controlled wave systems.

Adjoint:     -phi_tt + Lap phi + X^t phi_t + X^x . grad phi + V phi = source
Controlled:  -y_tt + Lap y - X^t y_t - X^x . grad y + q y = F

The adjoint recursion uses centred first-order terms at the middle level.  The
controlled recursion is the exact transpose of the adjoint one (conservative
form of the lower-order terms), so the discrete duality pairing between the two
is conserved to roundoff when q = V - div X.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import kernels
from ._kernels_py import gradient, laplacian
from .mesh import Grid, RegionMask, diff1, diff2, l2_norm, poisson_solver

# Gronwall constant used by the instability detector (calibrated on the energy ensemble).
GRONWALL_C = 2.0
ENVELOPE_FACTOR = 10.0


class WaveInstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Coefficients:
    """Lower-order terms; callables take (t, *x) and broadcast."""
    X: Callable | None = None
    V: Callable | None = None
    q: Callable | None = None
    divX: Callable | None = None
    name: str = "custom"

    def vector_field(self, t, xs):
        shape = np.broadcast_shapes(np.shape(t), *[np.shape(x) for x in xs])
        if self.X is None:
            return [np.zeros(shape) for _ in range(1 + len(xs))]
        comps = self.X(t, *xs)
        if len(comps) != 1 + len(xs):
            raise ValueError("X must return 1 + n components")
        return [np.broadcast_to(np.asarray(c, dtype=float), shape) for c in comps]

    def potential(self, t, xs):
        shape = np.broadcast_shapes(np.shape(t), *[np.shape(x) for x in xs])
        if self.V is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(self.V(t, *xs), dtype=float), shape)

    def divergence(self, t, xs, step=1e-5):
        shape = np.broadcast_shapes(np.shape(t), *[np.shape(x) for x in xs])
        if self.divX is not None:
            return np.broadcast_to(np.asarray(self.divX(t, *xs), dtype=float), shape)
        if self.X is None:
            return np.zeros(shape)
        coords = [t] + list(xs)
        total = np.zeros(shape)
        for i in range(len(coords)):
            plus = list(coords)
            minus = list(coords)
            plus[i] = coords[i] + step
            minus[i] = coords[i] - step
            total = total + (self.vector_field(plus[0], plus[1:])[i]
                             - self.vector_field(minus[0], minus[1:])[i]) / (2 * step)
        return total

    def forward_potential(self, t, xs):
        if self.q is not None:
            shape = np.broadcast_shapes(np.shape(t), *[np.shape(x) for x in xs])
            return np.broadcast_to(np.asarray(self.q(t, *xs), dtype=float), shape)
        return self.potential(t, xs) - self.divergence(t, xs)

    def dual_potential(self, t, xs):
        """Zeroth-order coefficient of the conservative forward operator (equals V by default)."""
        if self.q is None:
            return self.potential(t, xs)
        return self.forward_potential(t, xs) + self.divergence(t, xs)

    def jacobian_norm(self, t, xs, step=1e-5):
        coords = [t] + list(xs)
        shape = np.broadcast_shapes(*[np.shape(c) for c in coords])
        total = np.zeros(shape)
        for i in range(len(coords)):
            plus = list(coords)
            minus = list(coords)
            plus[i] = coords[i] + step
            minus[i] = coords[i] - step
            fp = self.vector_field(plus[0], plus[1:])
            fm = self.vector_field(minus[0], minus[1:])
            for a, b in zip(fp, fm):
                total = total + ((a - b) / (2 * step)) ** 2
        return np.sqrt(total)

    def bounds(self, grid: Grid, R_plus: float, time_stride: int = 1):
        """Sampled (M0, M1, M) over the closed space-time cylinder."""
        t = grid.times[::time_stride]
        t = np.concatenate([t, grid.times[-1:]]) if t[-1] != grid.times[-1] else t
        mesh = grid.mesh()
        tt = t.reshape((-1,) + (1,) * grid.n)
        xs = [x[None] for x in mesh]
        M0 = float(np.max(np.abs(self.potential(tt, xs))))
        X = self.vector_field(tt, xs)
        size = np.sqrt(sum(c * c for c in X))
        M1 = float(max(np.max(size) / math.sqrt(R_plus), np.max(self.jacobian_norm(tt, xs))))
        return M0, M1, max(1.0, M0, M1)


def _zero(t, *x):
    return 0.0


def _timedep_X(t, *xs):
    return (0.2 * np.sin(t),) + tuple(0.1 * x for x in xs)


def _timedep_V(t, *xs):
    return 0.5 * np.cos(t)


def _unit_V(t, *xs):
    return 1.0


def preset(name: str) -> Coefficients:
    """Named coefficient families: 'zero', 'timedep' (X=(0.2 sin t, 0.1 x), V=0.5 cos t), 'potential' (V=1)."""
    if name == "zero":
        return Coefficients(name="zero")
    if name == "timedep":
        return Coefficients(X=_timedep_X, V=_timedep_V, name="timedep")
    if name == "potential":
        return Coefficients(V=_unit_V, name="potential")
    raise KeyError(f"unknown coefficient preset {name!r}")


def _trig_X(t, *xs, amp, freq, phase, scale):
    first = amp[0] * np.sin(freq[0] * t + phase[0]) * np.cos(freq[1] * xs[0] + phase[1])
    rest = tuple(amp[1] * np.cos(freq[2] * t + phase[2]) * np.sin(freq[3] * x + phase[3]) for x in xs)
    return tuple(scale * c for c in (first,) + rest)


def _trig_V(t, *xs, amp, freq, phase, scale):
    return scale * amp[2] * np.cos(freq[4] * t + phase[4]) * np.cos(freq[5] * xs[0] + phase[5])


def random_coefficients(rng: np.random.Generator, grid: Grid, R_plus: float) -> Coefficients:
    """Smooth time-dependent X, V with random amplitudes, rescaled so that M0, M1 <= 1."""
    amp = tuple(rng.uniform(0.3, 1.0, 3))
    freq = tuple(rng.uniform(0.5, 2.0, 6))
    phase = tuple(rng.uniform(0, 2 * np.pi, 6))
    trial = Coefficients(X=functools.partial(_trig_X, amp=amp, freq=freq, phase=phase, scale=1.0),
                         V=functools.partial(_trig_V, amp=amp, freq=freq, phase=phase, scale=1.0))
    M0, M1, _ = trial.bounds(grid, R_plus, time_stride=4)
    sx = 1.0 / max(1.0, 1.05 * M1)
    sv = 1.0 / max(1.0, 1.05 * M0)
    return Coefficients(X=functools.partial(_trig_X, amp=amp, freq=freq, phase=phase, scale=sx),
                        V=functools.partial(_trig_V, amp=amp, freq=freq, phase=phase, scale=sv),
                        name="random")


# ---------------------------------------------------------------------------
# Discrete operators


class LeapfrogOperator:
    """Coefficient arrays sampled on every time level and interior node of a grid."""

    def __init__(self, coeffs: Coefficients, grid: Grid):
        self.coeffs = coeffs
        self.grid = grid
        self.h = grid.h
        self.k = grid.k
        t = grid.times.reshape((-1,) + (1,) * grid.n)
        xs = [x[grid.interior][None] for x in grid.mesh()]
        X = coeffs.vector_field(t, xs)
        shape = (grid.steps + 1,) + grid.interior_shape
        self.alpha = np.array(np.broadcast_to(X[0], shape))
        self.beta = np.stack([np.broadcast_to(c, shape) for c in X[1:]], axis=1)
        self.V = np.array(np.broadcast_to(coeffs.potential(t, xs), shape))
        self.q = np.array(np.broadcast_to(coeffs.forward_potential(t, xs), shape))
        self.pot_dual = np.array(np.broadcast_to(coeffs.dual_potential(t, xs), shape))
        self.a = 1 - self.alpha * self.k / 2
        self.c = 1 + self.alpha * self.k / 2
        if np.any(self.a <= 0) or np.any(self.c <= 0):
            raise WaveInstabilityError("time step too large for the first-order time coefficient")

    def _apply_adjoint_space(self, u, m):
        out = laplacian(u, self.h) + self.V[m] * u
        for axis, dx in enumerate(self.h):
            out = out + self.beta[m, axis] * gradient(u, axis, dx)
        return out

    def _apply_dual_space(self, y, m, pot):
        out = laplacian(y, self.h) + pot[m] * y
        for axis, dx in enumerate(self.h):
            out = out - gradient(self.beta[m, axis] * y, axis, dx)
        return out

    def adjoint_start(self, phi0, phi1, source0=None):
        acc = self._apply_adjoint_space(phi0, 0) + self.alpha[0] * phi1
        if source0 is not None:
            acc = acc - source0
        return phi0 + self.k * phi1 + self.k**2 / 2 * acc

    def adjoint_levels(self, phi0, phi1, source=None, backend=None):
        s0 = None if source is None else source[0]
        phi_1 = self.adjoint_start(phi0, phi1, s0)
        src = None if source is None else -source
        return kernels.primal_sweep(phi0, phi_1, self.a, self.c, self.beta, self.V, src,
                                    self.h, self.k, backend=backend)

    def controlled_start(self, y0, y1, F0=None):
        acc = laplacian(y0, self.h) + self.q[0] * y0 - self.alpha[0] * y1
        for axis, dx in enumerate(self.h):
            acc = acc - self.beta[0, axis] * gradient(y0, axis, dx)
        if F0 is not None:
            acc = acc - F0
        return y0 + self.k * y1 + self.k**2 / 2 * acc

    def controlled_levels(self, y0, y1, F=None, backend=None):
        F0 = None if F is None else F[0]
        y_1 = self.controlled_start(y0, y1, F0)
        src = None if F is None else -F
        return kernels.dual_sweep(y0, y_1, self.a, self.c, self.beta, self.pot_dual, src,
                                  self.h, self.k, backend=backend)

    def adjoint_transpose(self, cot, backend=None):
        """Gradient with respect to the seed (phi0, phi1) of sum(cot * adjoint_levels)."""
        lam0, lam1 = kernels.primal_transpose(cot, self.a, self.c, self.beta, self.V,
                                              self.h, self.k, backend=backend)
        k = self.k
        # transpose of the Taylor start phi^1 = S0 phi0 + S1 phi1
        g0 = lam0 + lam1 + k**2 / 2 * self._apply_dual_space(lam1, 0, self.V)
        g1 = (k + k**2 / 2 * self.alpha[0]) * lam1
        return g0, g1

    def pairing_series(self, y_levels, phi_levels):
        """Discrete duality pairing at every half step; constant in time when the control vanishes."""
        axes = tuple(range(1, y_levels.ndim))
        vol = self.grid.cell_volume
        first = np.sum(self.a[:-1] * y_levels[:-1] * phi_levels[1:], axis=axes)
        second = np.sum(self.c[1:] * y_levels[1:] * phi_levels[:-1], axis=axes)
        return vol / self.k * (first - second)

    def terminal_cotangent(self, y_prev, y_last):
        """Cotangent on the last two adjoint levels representing psi -> pairing(y_end, psi_end)."""
        cot = np.zeros((self.grid.steps + 1,) + self.grid.interior_shape)
        scale = self.grid.cell_volume / self.k
        cot[-1] = scale * self.a[-2] * y_prev
        cot[-2] = -scale * self.c[-1] * y_last
        return cot

    def duality_weights(self):
        """Time weights w_m with pairing_end = sum_m w_m <F^m, phi^m> for zero initial data."""
        w = np.full((self.grid.steps + 1,) + self.grid.interior_shape, self.k * self.grid.cell_volume)
        w[0] = self.k * self.grid.cell_volume / 2 * self.c[1]
        w[-1] = 0.0
        return w


@functools.lru_cache(maxsize=16)
def leapfrog_operator(coeffs: Coefficients, grid: Grid) -> LeapfrogOperator:
    return LeapfrogOperator(coeffs, grid)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True, eq=False)
class State:
    phi: np.ndarray
    phi_t: np.ndarray
    time: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    values: np.ndarray
    grid: Grid
    coeffs: Coefficients
    kind: str
    initial_velocity: np.ndarray

    @property
    def times(self):
        return self.grid.times

    @functools.cached_property
    def velocity(self):
        U, k = self.values, self.grid.k
        vel = np.empty_like(U)
        vel[0] = self.initial_velocity
        vel[1:-1] = (U[2:] - U[:-2]) / (2 * k)
        if U.shape[0] >= 3:
            vel[-1] = (3 * U[-1] - 4 * U[-2] + U[-3]) / (2 * k)
        else:
            vel[-1] = (U[-1] - U[-2]) / k
        return vel

    def state(self, j: int) -> State:
        return State(self.values[j], self.velocity[j], float(self.times[j]))

    def interior(self):
        return self.values[(slice(None),) + self.grid.interior]


def interior_data(values, grid: Grid, label: str):
    values = np.asarray(values, dtype=float)
    if values.shape == tuple(grid.nodes):
        boundary = values.copy()
        boundary[grid.interior] = 0.0
        scale = max(1.0, float(np.max(np.abs(values))))
        if np.max(np.abs(boundary)) > 1e-12 * scale:
            raise ValueError(f"{label} does not vanish on the boundary")
        return values[grid.interior].copy()
    if values.shape == grid.interior_shape:
        return values.copy()
    raise ValueError(f"{label} has shape {values.shape}, expected {grid.nodes}")


def _space_time_interior(values, grid: Grid, label: str):
    values = np.asarray(values, dtype=float)
    full = (grid.steps + 1,) + tuple(grid.nodes)
    if values.shape == full:
        return values[(slice(None),) + grid.interior]
    if values.shape == (grid.steps + 1,) + grid.interior_shape:
        return values
    raise ValueError(f"{label} has shape {values.shape}, expected {full}")


def _check_envelope(levels, grid, coeffs, E0):
    if not np.all(np.isfinite(levels)):
        raise WaveInstabilityError("non-finite values in the trajectory")
    R_plus = grid.domain.radius_range(grid.domain.x0)[1] or 1.0
    M0, M1, _ = coeffs.bounds(grid, R_plus, time_stride=max(1, grid.steps // 50))
    mass = l2_norm(grid.embed(levels), grid) ** 2
    allowed = ENVELOPE_FACTOR * np.exp(GRONWALL_C * (M0 + M1) * (grid.times + grid.T)) * 2 * E0
    if np.any(mass > allowed * (1 + 1e-9) + 1e-300):
        j = int(np.argmax(mass > allowed * (1 + 1e-9) + 1e-300))
        raise WaveInstabilityError(f"energy envelope exceeded at t={grid.times[j]:.6g}")


def _initial_energy(phi0, phi1, grid):
    return 0.5 * (float(l2_norm(grid.embed(phi0), grid)) ** 2
                  + float(poisson_solver(grid).dual_norm_sq(phi1)))


def solve_adjoint(coeffs: Coefficients, initial, grid: Grid, source=None, check: bool = True,
                  backend=None) -> Trajectory:
    """Leapfrog solution of the adjoint system from t = -T with data (phi0, phi1)."""
    phi0 = interior_data(initial[0], grid, "phi0")
    phi1 = interior_data(initial[1], grid, "phi1")
    op = leapfrog_operator(coeffs, grid)
    src = None if source is None else _space_time_interior(source, grid, "source")
    levels = op.adjoint_levels(phi0, phi1, src, backend=backend)
    if check:
        if source is None:
            _check_envelope(levels, grid, coeffs, _initial_energy(phi0, phi1, grid))
        elif not np.all(np.isfinite(levels)):
            raise WaveInstabilityError("non-finite values in the trajectory")
    return Trajectory(grid.embed(levels), grid, coeffs, "adjoint", grid.embed(phi1))


def solve_controlled(coeffs: Coefficients, initial, control, grid: Grid,
                     mask: RegionMask | None = None, check: bool = True, backend=None) -> Trajectory:
    """Leapfrog solution of the controlled system from t = -T; ``control`` is F on all nodes or None."""
    y0 = interior_data(initial[0], grid, "y0")
    y1 = interior_data(initial[1], grid, "y1")
    F = None
    if control is not None:
        control = np.asarray(control, dtype=float)
        outside = None if mask is None else np.broadcast_to(~mask.nodes, control.shape)
        if outside is not None and np.any(control[outside] != 0):
            raise ValueError("control is not supported inside the observation mask")
        F = _space_time_interior(control, grid, "control")
    op = leapfrog_operator(coeffs, grid)
    levels = op.controlled_levels(y0, y1, F, backend=backend)
    if check:
        if F is None:
            _check_envelope(levels, grid, coeffs, _initial_energy(y0, y1, grid))
        elif not np.all(np.isfinite(levels)):
            raise WaveInstabilityError("non-finite values in the trajectory")
    return Trajectory(grid.embed(levels), grid, coeffs, "controlled", grid.embed(y1))


def energy_series(traj: Trajectory):
    """E at every time level: half of ||phi||^2_{L^2} + ||phi_t||^2_{H^-1}."""
    grid = traj.grid
    mass = l2_norm(traj.values, grid) ** 2
    vel = traj.velocity[(slice(None),) + grid.interior]
    return 0.5 * (mass + poisson_solver(grid).dual_norm_sq(vel))


def energy(traj: Trajectory, t: float) -> float:
    j = traj.grid.time_index(t)
    grid = traj.grid
    mass = float(l2_norm(traj.values[j], grid)) ** 2
    vel = float(poisson_solver(grid).dual_norm_sq(traj.velocity[j][grid.interior]))
    return 0.5 * (mass + vel)


# ---------------------------------------------------------------------------
# Two-time lift


@dataclass(frozen=True, eq=False)
class TwoTimeField:
    """z(t1, t2, x) on a square time grid times the spatial nodes of ``grid``."""
    values: np.ndarray
    times: np.ndarray
    grid: Grid

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def scaled(self, factor):
        return TwoTimeField(self.values * factor, self.times, self.grid)


def build_z(traj: Trajectory, window=None, stride: int = 1, max_nodes: float = 6e7) -> TwoTimeField:
    """Composite-trapezoid antiderivative z(t1, t2) = int_{t1}^{t2} phi ds on a time sub-grid."""
    U = traj.values
    k = traj.grid.k
    anti = np.zeros_like(U)
    anti[1:] = np.cumsum((U[1:] + U[:-1]) * (k / 2), axis=0)
    times = traj.times
    idx = np.arange(times.size)
    if window is not None:
        lo, hi = window
        idx = idx[(times >= lo - 1e-12) & (times <= hi + 1e-12)]
    idx = idx[::stride]
    size = idx.size**2 * int(np.prod(U.shape[1:]))
    if size > max_nodes:
        raise MemoryError(f"two-time field would have {size} nodes; use a window or a stride")
    sub = anti[idx]
    return TwoTimeField(sub[None, :] - sub[:, None], times[idx], traj.grid)


def z_residual(z: TwoTimeField, coeffs: Coefficients, grid: Grid | None = None, chunk: int = 16) -> float:
    """Max-norm residual of z_t1t1 + z_t2t2 - Lap z - int_{t1}^{t2} (V z_t2 + X.grad z_t2) ds."""
    grid = z.grid if grid is None else grid
    Z = z.values
    dt = z.dt
    n1, n2 = Z.shape[:2]
    if n1 < 5:
        raise ValueError("need at least five time levels")
    s = z.times.reshape((1, -1) + (1,) * grid.n)
    xs = [x[None, None] for x in grid.mesh()]
    X = coeffs.vector_field(s, xs)
    V = coeffs.potential(s, xs)
    sp_int = grid.interior
    worst = 0.0
    for start in range(1, n1 - 1, chunk):
        stop = min(start + chunk, n1 - 1)
        block = Z[start - 1:stop + 1]
        core = block[1:-1]
        dz = diff1(core, 1, dt)
        g = V * dz + X[0] * diff2(core, 1, dt)
        for axis, dx in enumerate(grid.h):
            g = g + X[1 + axis] * diff1(dz, 2 + axis, dx)
        cum = cumulative_trapezoid(g, dx=dt, axis=1, initial=0)
        rows = np.arange(start, stop)
        rhs = cum - cum[np.arange(rows.size), rows][:, None]
        lhs = (block[2:] - 2 * core + block[:-2]) / dt**2
        lhs = lhs + diff2(core, 1, dt)
        for axis, dx in enumerate(grid.h):
            lhs = lhs - diff2(core, 2 + axis, dx)
        res = (lhs - rhs)[(slice(None), slice(1, n2 - 1)) + sp_int]
        if res.size:
            worst = max(worst, float(np.max(np.abs(res))))
    return worst


# ---------------------------------------------------------------------------
# Energy inequalities


@dataclass(frozen=True, eq=False)
class EnergyRecord:
    times: np.ndarray
    energy: np.ndarray
    mass: np.ndarray
    velocity_dual: np.ndarray
    M0: float
    M1: float


def energy_record(traj: Trajectory, R_plus: float) -> EnergyRecord:
    grid = traj.grid
    mass = l2_norm(traj.values, grid) ** 2
    vel = poisson_solver(grid).dual_norm_sq(traj.velocity[(slice(None),) + grid.interior])
    M0, M1, _ = traj.coeffs.bounds(grid, R_plus, time_stride=max(1, grid.steps // 200))
    return EnergyRecord(grid.times, 0.5 * (mass + vel), mass, vel, M0, M1)


def _gronwall_exponents(rec: EnergyRecord, stride: int):
    t = rec.times[::stride]
    E = rec.energy[::stride]
    gap = np.abs(t[:, None] - t[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.log(E[:, None] / E[None, :]) / ((rec.M0 + rec.M1) * gap)
    np.fill_diagonal(slope, -np.inf)
    return slope


def fit_gronwall_constant(records, stride: int = 10) -> float:
    """Smallest C2 with E(s) <= exp(C2 (M0+M1)|t-s|) E(t) at all sampled pairs."""
    return max(0.0, max(float(np.max(_gronwall_exponents(r, stride))) for r in records))


def gronwall_holds(records, C2: float, stride: int = 10) -> bool:
    for r in records:
        t = r.times[::stride]
        E = r.energy[::stride]
        bound = np.exp(C2 * (r.M0 + r.M1) * np.abs(t[:, None] - t[None, :])) * E[None, :]
        if np.any(E[:, None] > bound * (1 + 1e-12)):
            return False
    return True


def _window_ratios(rec: EnergyRecord, rng: np.random.Generator, count: int, min_gap: int):
    L = rec.times.size
    k = rec.times[1] - rec.times[0]
    cum_vel = np.concatenate([[0.0], np.cumsum((rec.velocity_dual[1:] + rec.velocity_dual[:-1]) * k / 2)])
    cum_mass = np.concatenate([[0.0], np.cumsum((rec.mass[1:] + rec.mass[:-1]) * k / 2)])
    out = []
    for _ in range(count):
        s1, s2, t2, t1 = np.sort(rng.choice(L - 3 * min_gap, 4, replace=False)) + np.arange(4) * min_gap
        inner = cum_vel[t2] - cum_vel[s2]
        outer = cum_mass[t1] - cum_mass[s1]
        out.append(inner / ((rec.M0 + rec.M1) * outer))
    return np.array(out)


def fit_window_constant(records, seed: int = 0, windows: int = 200) -> tuple[float, list]:
    """Smallest C1 with int_{s2}^{t2} ||phi'||^2_{H^-1} <= C1 (M0+M1) int_{s1}^{t1} ||phi||^2 on sampled windows."""
    rng = np.random.default_rng(seed)
    ratios = [_window_ratios(r, rng, windows, max(1, r.times.size // 50)) for r in records]
    return float(max(np.max(r) for r in ratios)), ratios
