"""Control synthesis by the Hilbert Uniqueness Method on the discrete solvers.

Seeds (phi0, phi1) live on interior nodes with the pivot inner product
    <(a0, a1), (b0, b1)> = vol * (a0 . b0 + a1 . A^{-1} b1),      A = discrete -Lap,
i.e. L^2 x H^-1.  The Gramian maps a seed to the Riesz representative of the terminal pairing
of the controlled trajectory driven by F = phi * 1_W.  Because the controlled recursion is the
exact transpose of the adjoint one, the Gramian is symmetric positive semidefinite to roundoff.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Grid, RegionMask, poisson_solver
from .observability import ObservationSetup, estimate_constant
from .wave import (Coefficients, LeapfrogOperator, gradient, interior_data, laplacian, leapfrog_operator,
                   solve_controlled)

STAGNATION_WINDOW = 20
STAGNATION_FACTOR = 0.99


class ObservabilityFailure(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ControlProblem:
    coeffs: Coefficients
    initial: tuple
    target: tuple
    setup: ObservationSetup

    @property
    def grid(self) -> Grid:
        return self.setup.grid

    @property
    def operator(self) -> LeapfrogOperator:
        return leapfrog_operator(self.coeffs, self.grid)

    @property
    def control_fraction(self):
        return self.setup.W.fraction[(slice(None),) + self.grid.interior]


def null_control_problem(coeffs, initial, setup) -> ControlProblem:
    zero = np.zeros(tuple(setup.grid.nodes))
    return ControlProblem(coeffs, initial, (zero, zero), setup)


@dataclass(frozen=True, eq=False)
class HUMSolution:
    adjoint_seed: tuple
    control: np.ndarray
    achieved: tuple
    terminal_error: float
    cg_iterations: int
    gramian_residual: float
    residual_history: np.ndarray
    terminal_history: np.ndarray
    converged: bool
    stagnated: bool
    predicted_control_norm: float
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Pivot space


class PivotSpace:
    def __init__(self, grid: Grid):
        self.grid = grid
        self.vol = grid.cell_volume
        self.poisson = poisson_solver(grid)

    def inner(self, x, y):
        return self.vol * (float(np.sum(x[0] * y[0])) + float(np.sum(x[1] * self.poisson.solve(y[1]))))

    def norm(self, x):
        return np.sqrt(max(self.inner(x, x), 0.0))

    def riesz(self, g0, g1):
        """Pivot element representing the Euclidean covector (g0, g1)."""
        return g0 / self.vol, self.poisson.apply(g1) / self.vol


def _axpy(a, x, y):
    return (y[0] + a * x[0], y[1] + a * x[1])


# ---------------------------------------------------------------------------
# Terminal states


def levels_from_state(op: LeapfrogOperator, y, y_t):
    """Last two controlled levels carrying the state (y, y_t) at t = T (backward Taylor step, F = 0)."""
    m = -1
    acc = laplacian(y, op.h) + op.q[m] * y - op.alpha[m] * y_t
    for axis, dx in enumerate(op.h):
        acc = acc - op.beta[m, axis] * gradient(y, axis, dx)
    return y - op.k * y_t + op.k**2 / 2 * acc, y


def state_from_levels(op: LeapfrogOperator, prev, last):
    """Exact inverse of ``levels_from_state``."""
    m = -1
    k = op.k
    rest = laplacian(last, op.h) + op.q[m] * last
    for axis, dx in enumerate(op.h):
        rest = rest - op.beta[m, axis] * gradient(last, axis, dx)
    vel = (last - prev + k**2 / 2 * rest) / (k * (1 + k * op.alpha[m] / 2))
    return last, vel


def _state_norm_sq(grid, y, y_t):
    """H^1_0 x L^2 norm squared."""
    solver = poisson_solver(grid)
    return float(solver.grad_norm_sq(y)) + grid.cell_volume * float(np.sum(y_t * y_t))


# ---------------------------------------------------------------------------
# Gramian


def _apply(seed, problem: ControlProblem, space: PivotSpace):
    op = problem.operator
    phi = op.adjoint_levels(seed[0], seed[1])
    F = phi * problem.control_fraction
    Y = op.controlled_levels(np.zeros_like(seed[0]), np.zeros_like(seed[1]), F)
    cot = op.terminal_cotangent(Y[-2], Y[-1])
    g0, g1 = op.adjoint_transpose(cot)
    return space.riesz(g0, g1), (Y[-2], Y[-1])


def lambda_apply(adjoint_seed, problem: ControlProblem):
    """Gramian applied to a seed: adjoint solve, F = phi 1_W, controlled solve from rest, terminal Riesz map."""
    grid = problem.grid
    seed = (interior_data(adjoint_seed[0], grid, "phi0"), interior_data(adjoint_seed[1], grid, "phi1"))
    return _apply(seed, problem, PivotSpace(grid))[0]


def _terminal_rhs(problem: ControlProblem, space: PivotSpace, prev, last):
    op = problem.operator
    g0, g1 = op.adjoint_transpose(op.terminal_cotangent(prev, last))
    return space.riesz(g0, g1)


def _free_levels(problem: ControlProblem):
    grid = problem.grid
    y0 = interior_data(problem.initial[0], grid, "y0")
    y1 = interior_data(problem.initial[1], grid, "y1")
    Y = problem.operator.controlled_levels(y0, y1)
    return Y[-2], Y[-1]


def _target_levels(problem: ControlProblem):
    grid = problem.grid
    y = interior_data(problem.target[0], grid, "target y")
    y_t = interior_data(problem.target[1], grid, "target y_t")
    return levels_from_state(problem.operator, y, y_t)


def assemble_lambda(problem: ControlProblem):
    """Dense Gramian (columns = images of unit seeds) and the pivot Gram matrix, for small grids."""
    grid = problem.grid
    space = PivotSpace(grid)
    size = int(np.prod(grid.interior_shape))
    shape = grid.interior_shape
    cols = []
    for part in (0, 1):
        for i in range(size):
            e = [np.zeros(shape), np.zeros(shape)]
            e[part].flat[i] = 1.0
            out, _ = _apply(tuple(e), problem, space)
            cols.append(np.concatenate([out[0].ravel(), out[1].ravel()]))
    lam = np.array(cols).T
    ainv = space.poisson.solve(np.eye(size).reshape((size,) + shape)).reshape(size, size)
    gram = np.zeros((2 * size, 2 * size))
    gram[:size, :size] = space.vol * np.eye(size)
    gram[size:, size:] = space.vol * 0.5 * (ainv + ainv.T)
    return lam, gram


def gramian_checks(problem: ControlProblem):
    """(relative symmetry defect, relative most-negative eigenvalue) of the Gramian in the pivot metric."""
    lam, gram = assemble_lambda(problem)
    form = gram @ lam
    scale = np.linalg.norm(form)
    sym = np.linalg.norm(form - form.T) / scale
    eig = np.linalg.eigvalsh(0.5 * (form + form.T))
    return float(sym), float(max(0.0, -eig[0]) / max(abs(eig[-1]), 1e-300))


# ---------------------------------------------------------------------------
# Solver


def _check_observable(problem: ControlProblem):
    report = estimate_constant(problem.setup, problem.coeffs, ensemble_size=10, modes=5)
    if not np.isfinite(report.estimates[-1]):
        raise ObservabilityFailure("observation region does not observe the low modes")


def solve_hum(problem: ControlProblem, tol: float = 1e-2, max_iter: int = 200,
              check_observability: bool = True) -> HUMSolution:
    """Conjugate-residual solve of Gramian(seed) = b in the pivot metric; stops on the terminal error."""
    grid = problem.grid
    op = problem.operator
    space = PivotSpace(grid)
    if check_observability:
        _check_observable(problem)
    free = _free_levels(problem)
    target = _target_levels(problem)
    gap = (target[0] - free[0], target[1] - free[1])
    gap_state = state_from_levels(op, *gap)
    gap_norm = np.sqrt(_state_norm_sq(grid, *gap_state))
    shape = grid.interior_shape
    zero_seed = (np.zeros(shape), np.zeros(shape))
    if gap_norm == 0:
        return _finish(problem, zero_seed, 0, 0.0, [0.0], [0.0], True, False, gap_norm)

    def terminal_error(ends):
        achieved = state_from_levels(op, free[0] + ends[0], free[1] + ends[1])
        target_state = state_from_levels(op, *target)
        diff = (achieved[0] - target_state[0], achieved[1] - target_state[1])
        return np.sqrt(_state_norm_sq(grid, *diff)) / gap_norm

    b = _terminal_rhs(problem, space, *gap)
    b_norm = space.norm(b)
    x = zero_seed
    x_ends = (np.zeros(shape), np.zeros(shape))
    r = b
    Ar, r_ends = _apply(r, problem, space)
    p, Ap, p_ends = r, Ar, r_ends
    rAr = space.inner(r, Ar)
    residuals = [1.0]
    errors = [terminal_error(x_ends)]
    converged = errors[-1] <= tol
    stagnated = False
    it = 0
    while not converged and it < max_iter:
        ApAp = space.inner(Ap, Ap)
        if ApAp <= 0 or rAr <= 0:
            stagnated = True
            break
        alpha = rAr / ApAp
        x = _axpy(alpha, p, x)
        x_ends = _axpy(alpha, p_ends, x_ends)
        r = _axpy(-alpha, Ap, r)
        it += 1
        residuals.append(space.norm(r) / b_norm)
        errors.append(terminal_error(x_ends))
        if errors[-1] <= tol:
            converged = True
            break
        if it >= STAGNATION_WINDOW and residuals[-1] > STAGNATION_FACTOR * residuals[-1 - STAGNATION_WINDOW]:
            stagnated = True
            break
        Ar, r_ends = _apply(r, problem, space)
        rAr_new = space.inner(r, Ar)
        beta = rAr_new / rAr
        rAr = rAr_new
        p = _axpy(beta, p, r)
        Ap = _axpy(beta, Ap, Ar)
        p_ends = _axpy(beta, p_ends, r_ends)
    return _finish(problem, x, it, residuals[-1] if residuals else 0.0, residuals, errors,
                   converged, stagnated, gap_norm, tracked_error=errors[-1])


def _finish(problem, seed, iterations, gram_res, residuals, errors, converged, stagnated, gap_norm,
            tracked_error=0.0):
    """Recompute control and terminal state with a full solve from the final seed."""
    grid = problem.grid
    op = problem.operator
    phi = op.adjoint_levels(seed[0], seed[1])
    F = grid.embed(phi * problem.control_fraction)
    traj = solve_controlled(problem.coeffs, problem.initial, F, grid, mask=problem.setup.W, check=False)
    Y = traj.interior()
    achieved = state_from_levels(op, Y[-2], Y[-1])
    target = state_from_levels(op, *_target_levels(problem))
    diff = (achieved[0] - target[0], achieved[1] - target[1])
    err = np.sqrt(_state_norm_sq(grid, *diff)) / gap_norm if gap_norm > 0 else 0.0
    predicted = np.sqrt(max(float(np.sum(op.duality_weights() * problem.control_fraction * phi * phi)), 0.0))
    if gap_norm > 0:
        converged = err <= errors[-1] * (1 + 1e-6) + 1e-12 and converged
    return HUMSolution(
        adjoint_seed=(grid.embed(seed[0]), grid.embed(seed[1])),
        control=F,
        achieved=(grid.embed(achieved[0]), grid.embed(achieved[1])),
        terminal_error=float(err),
        cg_iterations=int(iterations),
        gramian_residual=float(gram_res),
        residual_history=np.asarray(residuals, float),
        terminal_history=np.asarray(errors, float),
        converged=bool(converged),
        stagnated=bool(stagnated),
        predicted_control_norm=float(predicted),
        diagnostics={"tracked_terminal_error": float(tracked_error), "mismatch_norm": float(gap_norm)},
    )


@dataclass(frozen=True)
class ControlVerification:
    terminal_error: float
    control_norm: float
    max_state_difference: float
    support_ok: bool


def control_norm(F, setup: ObservationSetup) -> float:
    """L^2 norm of F over the space-time cylinder (trapezoid)."""
    weights = RegionMask(np.ones_like(setup.W.fraction), setup.W.spacings).weights()
    return float(np.sqrt(np.sum(weights * F * F)))


def verify_control(solution: HUMSolution, problem: ControlProblem) -> ControlVerification:
    """Re-solve the controlled system with the stored control; support violations are hard failures."""
    grid = problem.grid
    op = problem.operator
    F = np.asarray(solution.control)
    outside = F[~problem.setup.W.nodes]
    if np.any(outside != 0):
        raise ValueError("control is not supported in W")
    traj = solve_controlled(problem.coeffs, problem.initial, F, grid, mask=problem.setup.W, check=False)
    Y = traj.interior()
    achieved = state_from_levels(op, Y[-2], Y[-1])
    target = state_from_levels(op, *_target_levels(problem))
    gap_norm = solution.diagnostics.get("mismatch_norm", 0.0)
    diff = (achieved[0] - target[0], achieved[1] - target[1])
    err = np.sqrt(_state_norm_sq(grid, *diff))
    err = err / gap_norm if gap_norm > 0 else err
    stored = (grid.restrict(solution.achieved[0]), grid.restrict(solution.achieved[1]))
    delta = max(float(np.max(np.abs(achieved[0] - stored[0]))), float(np.max(np.abs(achieved[1] - stored[1]))))
    return ControlVerification(float(err), control_norm(F, problem.setup), delta, True)
