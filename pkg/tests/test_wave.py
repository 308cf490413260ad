import math

import numpy as np
import pytest
import sympy as sym
from hypothesis import given
from hypothesis import strategies as st

from carleman_lab import kernels, wave
from carleman_lab.mesh import SpatialDomain, build_grid

DOMAIN = SpatialDomain.interval(0.0, 1.0, -0.5)


def sine(grid, mode=1):
    return np.sin(mode * math.pi * grid.axes()[0])


def random_data(grid, rng, modes=4):
    x = grid.axes()[0]
    phi0 = sum(rng.normal() * np.sin(j * math.pi * x) for j in range(1, modes + 1))
    phi1 = sum(rng.normal() * np.sin(j * math.pi * x) for j in range(1, modes + 1))
    return phi0, phi1


# --- exact solutions ------------------------------------------------------------

def standing_wave_error(nodes, T=1.0):
    grid = build_grid(DOMAIN, T, nodes)
    traj = wave.solve_adjoint(wave.preset("zero"), (sine(grid), np.zeros(nodes)), grid)
    exact = np.cos(math.pi * (grid.times + T))[:, None] * sine(grid)[None]
    return float(np.max(np.abs(traj.values - exact)))


def test_standing_wave_second_order():
    coarse, fine = standing_wave_error(41), standing_wave_error(81)
    assert fine < 1e-3
    assert math.log2(coarse / fine) > 1.8


def manufactured():
    t, x = sym.symbols("t x")
    phi = sym.sin(sym.pi * x) * sym.exp(-t**2) * (1 + x * t)
    # adjoint operator with V = 1 and X = 0
    source = -sym.diff(phi, t, 2) + sym.diff(phi, x, 2) + phi
    return sym.lambdify((t, x), phi, "numpy"), sym.lambdify((t, x), source, "numpy"), \
        sym.lambdify((t, x), sym.diff(phi, t), "numpy")


def manufactured_error(nodes):
    phi, source, phi_t = manufactured()
    grid = build_grid(DOMAIN, 1.0, nodes)
    tt, xx = np.meshgrid(grid.times, grid.axes()[0], indexing="ij")
    t0 = grid.times[0]
    x = grid.axes()[0]
    traj = wave.solve_adjoint(wave.preset("potential"), (phi(t0, x), phi_t(t0, x)), grid,
                              source=source(tt, xx))
    return float(np.max(np.abs(traj.values - phi(tt, xx))))


def test_manufactured_solution_with_potential():
    coarse, fine = manufactured_error(51), manufactured_error(101)
    assert fine < 1e-3
    assert math.log2(coarse / fine) > 1.8


def test_zero_data_gives_zero_solution():
    grid = build_grid(DOMAIN, 1.0, 21)
    traj = wave.solve_adjoint(wave.preset("timedep"), (np.zeros(21), np.zeros(21)), grid)
    assert np.all(traj.values == 0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_superposition(alpha, beta, seed):
    grid = build_grid(DOMAIN, 1.0, 31)
    rng = np.random.default_rng(seed)
    a, b = random_data(grid, rng), random_data(grid, rng)
    co = wave.preset("timedep")
    combo = tuple(alpha * p + beta * q for p, q in zip(a, b))
    lhs = wave.solve_adjoint(co, combo, grid, check=False).values
    rhs = alpha * wave.solve_adjoint(co, a, grid, check=False).values \
        + beta * wave.solve_adjoint(co, b, grid, check=False).values
    scale = max(1.0, float(np.max(np.abs(lhs))))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


def test_rejects_data_not_vanishing_on_boundary():
    grid = build_grid(DOMAIN, 1.0, 11)
    with pytest.raises(ValueError, match="boundary"):
        wave.solve_adjoint(wave.preset("zero"), (np.ones(11), np.zeros(11)), grid)


def test_large_time_coefficient_is_rejected():
    grid = build_grid(DOMAIN, 1.0, 11)
    co = wave.Coefficients(X=lambda t, x: (1e6 + 0 * x, 0 * x), name="huge")
    with pytest.raises(wave.WaveInstabilityError):
        wave.solve_adjoint(co, (sine(grid), np.zeros(11)), grid)


# --- duality and backends -------------------------------------------------------

@pytest.mark.parametrize("name", ["zero", "timedep", "potential"])
def test_pairing_conserved(name):
    grid = build_grid(DOMAIN, 1.0, 41)
    rng = np.random.default_rng(3)
    co = wave.preset(name)
    phi = wave.solve_adjoint(co, random_data(grid, rng), grid).interior()
    y = wave.solve_controlled(co, random_data(grid, rng), None, grid).interior()
    series = wave.leapfrog_operator(co, grid).pairing_series(y, phi)
    assert np.ptp(series) <= 1e-11 * max(1.0, np.max(np.abs(series)))


def test_adjoint_transpose_identity():
    grid = build_grid(SpatialDomain.box((0, 1), (0, 1)), 0.5, 9)
    co = wave.preset("timedep")
    op = wave.leapfrog_operator(co, grid)
    rng = np.random.default_rng(4)
    phi0, phi1 = rng.normal(size=(2,) + grid.interior_shape)
    cot = rng.normal(size=(grid.steps + 1,) + grid.interior_shape)
    g0, g1 = op.adjoint_transpose(cot)
    lhs = np.sum(cot * op.adjoint_levels(phi0, phi1))
    rhs = np.sum(g0 * phi0) + np.sum(g1 * phi1)
    assert lhs == pytest.approx(rhs, rel=1e-11)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("dims", [1, 2])
def test_backends_agree(dims):
    dom = DOMAIN if dims == 1 else SpatialDomain.box((0, 1), (0, 1), (-0.5, -0.5))
    grid = build_grid(dom, 1.0, 21)
    co = wave.preset("timedep")
    x = grid.mesh()
    phi0 = np.prod([np.sin(math.pi * c) for c in x], axis=0)
    data = (phi0, 2 * phi0)
    a = wave.solve_adjoint(co, data, grid, backend="numpy").values
    b = wave.solve_adjoint(co, data, grid, backend="cython").values
    np.testing.assert_allclose(a, b, atol=1e-12)
    a = wave.solve_controlled(co, data, None, grid, backend="numpy").values
    b = wave.solve_controlled(co, data, None, grid, backend="cython").values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_controlled_support_check():
    from carleman_lab.mesh import RegionMask
    grid = build_grid(DOMAIN, 1.0, 11)
    mask = RegionMask(np.r_[np.zeros(6), np.ones(5)], grid.h)
    F = np.zeros((grid.steps + 1, 11))
    F[:, 2] = 1.0
    with pytest.raises(ValueError, match="not supported"):
        wave.solve_controlled(wave.preset("zero"), (np.zeros(11), np.zeros(11)), F, grid, mask=mask)


# --- energy -----------------------------------------------------------------------

def test_energy_conserved_without_coefficients():
    grid = build_grid(DOMAIN, 1.0, 101)
    traj = wave.solve_adjoint(wave.preset("zero"), (sine(grid), 0.5 * sine(grid, 2)), grid)
    E = wave.energy_series(traj)
    assert np.ptp(E) / E[0] < 1e-3
    assert wave.energy(traj, 0.0) == pytest.approx(E[grid.time_index(0.0)])


def test_gronwall_constant_below_detector_constant():
    grid = build_grid(DOMAIN, 1.0, 61)
    rng = np.random.default_rng(5)
    R_plus = DOMAIN.radius_range(DOMAIN.x0)[1]
    records = [wave.energy_record(wave.solve_adjoint(wave.preset("timedep"), random_data(grid, rng), grid),
                                  R_plus) for _ in range(4)]
    C2 = wave.fit_gronwall_constant(records)
    assert 0 < C2 <= wave.GRONWALL_C
    assert wave.gronwall_holds(records, C2 * (1 + 1e-9))
    C1, ratios = wave.fit_window_constant(records, windows=50)
    assert np.isfinite(C1) and C1 > 0 and len(ratios) == 4


def test_random_coefficients_are_bounded():
    grid = build_grid(DOMAIN, 1.0, 21)
    co = wave.random_coefficients(np.random.default_rng(6), grid, 1.5)
    M0, M1, M = co.bounds(grid, 1.5)
    assert M0 <= 1 and M1 <= 1 and M == 1


def test_timedep_bounds():
    grid = build_grid(DOMAIN, 1.0, 21)
    M0, M1, M = wave.preset("timedep").bounds(grid, 1.5)
    assert M0 == pytest.approx(0.5) and M1 == pytest.approx(math.sqrt(0.05), rel=1e-6) and M == 1.0


# --- two-time lift ------------------------------------------------------------------

def test_lift_matches_analytic_antiderivative():
    T = 1.0
    grid = build_grid(DOMAIN, T, 101)
    traj = wave.solve_adjoint(wave.preset("zero"), (sine(grid), np.zeros(101)), grid)
    z = wave.build_z(traj, stride=4)
    s = np.sin(math.pi * (z.times + T)) / math.pi
    exact = (s[None, :] - s[:, None])[..., None] * sine(grid)
    assert np.max(np.abs(z.values - exact)) < 1e-3


def test_lift_diagonal_and_antisymmetry():
    grid = build_grid(DOMAIN, 1.0, 31)
    traj = wave.solve_adjoint(wave.preset("timedep"), random_data(grid, np.random.default_rng(7)), grid)
    Z = wave.build_z(traj).values
    assert np.all(np.diagonal(Z, axis1=0, axis2=1) == 0)
    np.testing.assert_allclose(Z, -np.swapaxes(Z, 0, 1), atol=1e-15)


def test_lift_window_and_memory_guard():
    grid = build_grid(DOMAIN, 1.0, 41)
    traj = wave.solve_adjoint(wave.preset("zero"), (sine(grid), np.zeros(41)), grid)
    z = wave.build_z(traj, window=(-0.5, 0.5))
    assert z.times[0] >= -0.5 - 1e-12 and z.times[-1] <= 0.5 + 1e-12
    with pytest.raises(MemoryError):
        wave.build_z(traj, max_nodes=100)


def test_lift_residual_zero_field():
    grid = build_grid(DOMAIN, 1.0, 21)
    z = wave.TwoTimeField(np.zeros((9, 9, 21)), np.linspace(0, 1, 9), grid)
    assert wave.z_residual(z, wave.preset("timedep")) == 0.0


def closed_form_lift(nodes, potential):
    """Exact lift of phi = sin(pi x) cos(w t) with w^2 = pi^2 - V."""
    grid = build_grid(DOMAIN, 0.5, nodes)
    w = math.sqrt(math.pi**2 - 1.0)
    t = np.linspace(-0.5, 0.5, nodes)
    s = np.sin(w * t) / w
    values = (s[None, :] - s[:, None])[..., None] * sine(grid)
    co = wave.Coefficients(V=lambda t, *x: potential, name=f"V={potential}")
    return wave.z_residual(wave.TwoTimeField(values, t, grid), co)


def test_lift_residual_closed_form_constant_potential():
    coarse, fine = closed_form_lift(41, 1.0), closed_form_lift(81, 1.0)
    assert fine < 1e-3 and math.log2(coarse / fine) > 1.8
    # the opposite sign of the potential leaves an O(1) residual
    assert closed_form_lift(81, -1.0) > 0.1


def test_lift_residual_converges_for_discrete_trajectories():
    res = []
    for nodes in (51, 101):
        grid = build_grid(DOMAIN, 1.0, nodes)
        traj = wave.solve_adjoint(wave.preset("timedep"), (sine(grid), 0.5 * sine(grid, 2)), grid)
        res.append(wave.z_residual(wave.build_z(traj, window=(-0.5, 0.5)), wave.preset("timedep")))
    assert res[1] < res[0] / 3
