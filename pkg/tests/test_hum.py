import numpy as np
import pytest

from carleman_lab import hum, wave
from carleman_lab import observability as ob
from carleman_lab.mesh import SpatialDomain

DOMAIN = SpatialDomain.interval(0.0, 1.0, -0.5)


def problem(nodes=51, sigma=0.3, coeffs="timedep"):
    s = ob.make_setup(DOMAIN, "exterior", -0.5, sigma, 2.0, resolution=nodes)
    x = s.grid.axes()[0]
    return hum.null_control_problem(wave.preset(coeffs),
                                    (np.sin(np.pi * x), 0.5 * np.sin(2 * np.pi * x)), s)


@pytest.fixture(scope="module")
def small():
    return problem(15)


def test_zero_seed_maps_to_zero(small):
    zero = np.zeros(15)
    out = hum.lambda_apply((zero, zero), small)
    assert np.all(out[0] == 0) and np.all(out[1] == 0)


def test_gramian_symmetric_and_semidefinite(small):
    sym, neg = hum.gramian_checks(small)
    assert sym <= 1e-12 and neg <= 1e-12


def test_gramian_linear(small):
    rng = np.random.default_rng(0)
    shape = small.grid.interior_shape
    a = tuple(small.grid.embed(rng.normal(size=shape)) for _ in range(2))
    b = tuple(small.grid.embed(rng.normal(size=shape)) for _ in range(2))
    la, lb = hum.lambda_apply(a, small), hum.lambda_apply(b, small)
    lab = hum.lambda_apply((a[0] + 2 * b[0], a[1] + 2 * b[1]), small)
    np.testing.assert_allclose(lab[0], la[0] + 2 * lb[0], atol=1e-10)


def test_level_state_round_trip(small):
    op = small.operator
    rng = np.random.default_rng(1)
    y, y_t = rng.normal(size=(2,) + small.grid.interior_shape)
    back = hum.state_from_levels(op, *hum.levels_from_state(op, y, y_t))
    np.testing.assert_allclose(back[0], y, atol=1e-10)
    np.testing.assert_allclose(back[1], y_t, atol=1e-8)


def test_pivot_riesz_map(small):
    space = hum.PivotSpace(small.grid)
    rng = np.random.default_rng(2)
    g = tuple(rng.normal(size=small.grid.interior_shape) for _ in range(2))
    x = tuple(rng.normal(size=small.grid.interior_shape) for _ in range(2))
    lhs = space.inner(space.riesz(*g), x)
    assert lhs == pytest.approx(float(np.sum(g[0] * x[0]) + np.sum(g[1] * x[1])), rel=1e-10)


def test_zero_mismatch_needs_no_iterations():
    p = problem(31)
    zero = np.zeros(31)
    p = hum.null_control_problem(p.coeffs, (zero, zero), p.setup)
    sol = hum.solve_hum(p)
    assert sol.cg_iterations == 0 and sol.terminal_error == 0.0 and np.all(sol.control == 0)


def test_control_reaches_target_and_stays_in_region():
    p = problem()
    sol = hum.solve_hum(p, tol=1e-2)
    assert sol.converged and sol.terminal_error <= 1e-2
    assert np.all(sol.control[~p.setup.W.nodes] == 0)
    check = hum.verify_control(sol, p)
    assert check.max_state_difference <= 1e-12
    assert check.terminal_error == pytest.approx(sol.terminal_error, rel=1e-9, abs=1e-14)


def test_residual_history_monotone():
    sol = hum.solve_hum(problem(), tol=1e-3)
    assert np.all(np.diff(sol.residual_history) <= 1e-12)


def test_tighter_tolerance_gives_smaller_error():
    p = problem()
    loose, tight = hum.solve_hum(p, tol=1e-1), hum.solve_hum(p, tol=1e-3)
    assert tight.terminal_error < loose.terminal_error
    assert tight.cg_iterations >= loose.cg_iterations


def test_wider_region_needs_smaller_control():
    narrow, wide = problem(sigma=0.2), problem(sigma=0.4)
    a, b = hum.solve_hum(narrow), hum.solve_hum(wide)
    assert hum.control_norm(b.control, wide.setup) < hum.control_norm(a.control, narrow.setup)
    assert b.cg_iterations <= a.cg_iterations


def test_verify_rejects_control_outside_region():
    p = problem(31)
    sol = hum.solve_hum(p)
    bad = sol.control.copy()
    bad[~p.setup.W.nodes] = 1.0
    tampered = hum.HUMSolution(sol.adjoint_seed, bad, sol.achieved, sol.terminal_error, sol.cg_iterations,
                               sol.gramian_residual, sol.residual_history, sol.terminal_history,
                               sol.converged, sol.stagnated, sol.predicted_control_norm, sol.diagnostics)
    with pytest.raises(ValueError, match="not supported"):
        hum.verify_control(tampered, p)


def test_iteration_cap_reports_not_converged():
    sol = hum.solve_hum(problem(), tol=1e-12, max_iter=2)
    assert not sol.converged and sol.cg_iterations == 2
