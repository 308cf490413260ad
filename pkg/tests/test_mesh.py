import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carleman_lab import mesh as m


def unit_interval(x0=-0.5):
    return m.SpatialDomain.interval(0.0, 1.0, x0)


def unit_box(x0=(-0.5, -0.5)):
    return m.SpatialDomain.box((0.0, 1.0), (0.0, 1.0), x0)


def test_domain_radius_range():
    lo, hi = unit_box().radius_range((-0.5, -0.5))
    assert lo == pytest.approx(math.sqrt(0.5)) and hi == pytest.approx(math.sqrt(4.5))


def test_domain_rejects_degenerate_axis():
    with pytest.raises(ValueError):
        m.SpatialDomain.interval(1.0, 1.0)


def test_grid_respects_cfl_and_covers_window():
    grid = m.build_grid(unit_interval(), 1.3, 41)
    assert grid.k <= 0.5 * grid.h_min * (1 + 1e-12)
    assert grid.times[0] == -1.3 and grid.times[-1] == pytest.approx(1.3)


def test_grid_rejects_unstable_cfl():
    with pytest.raises(ValueError):
        m.build_grid(unit_box(), 1.0, 11, cfl=0.8)


def test_grid_clamps_large_step():
    with pytest.warns(UserWarning):
        grid = m.build_grid(unit_interval(), 1.0, 11, k=1.0)
    assert grid.k <= 0.5 * grid.h_min * (1 + 1e-12)


def test_embed_restrict_round_trip():
    grid = m.build_grid(unit_box(), 1.0, (7, 9))
    vals = np.random.default_rng(0).normal(size=grid.interior_shape)
    full = grid.embed(vals)
    assert full.shape == (7, 9) and np.all(full[0] == 0)
    np.testing.assert_array_equal(grid.restrict(full), vals)


def test_time_index_rejects_off_grid_time():
    grid = m.build_grid(unit_interval(), 1.0, 11)
    assert grid.time_index(grid.times[3]) == 3
    with pytest.raises(ValueError):
        grid.time_index(grid.times[3] + grid.k / 3)


@given(st.integers(3, 40), st.integers(3, 40))
def test_full_mask_integrates_area(nx, ny):
    grid = m.build_grid(m.SpatialDomain.box((0, 2), (-1, 0.5), (3, 3)), 1.0, (nx, ny))
    mask = m.RegionMask(np.ones((nx, ny)), grid.h)
    assert m.integrate(1.0, mask) == pytest.approx(3.0, rel=1e-12)


def test_trapezoid_integrates_linear_exactly():
    grid = m.build_grid(unit_interval(), 1.0, 11)
    mask = m.RegionMask(np.ones(11), grid.h)
    assert m.integrate(grid.axes()[0], mask) == pytest.approx(0.5, abs=1e-15)


def test_integrate_rejects_non_finite_values():
    mask = m.RegionMask(np.ones(4), (1.0,))
    with pytest.raises(FloatingPointError):
        m.integrate(np.array([0.0, np.nan, 1.0, 1.0]), mask)


def test_integrate_ignores_non_finite_values_outside_mask():
    mask = m.RegionMask(np.array([1.0, 0.0, 1.0]), (1.0,))
    assert m.integrate(np.array([1.0, np.inf, 1.0]), mask) == 1.0


def test_mask_algebra():
    a = m.RegionMask(np.array([1.0, 0.5, 0.0]), (1.0,))
    b = m.RegionMask(np.array([0.0, 0.5, 1.0]), (1.0,))
    np.testing.assert_array_equal((a & b).fraction, [0, 0.25, 0])
    np.testing.assert_array_equal(a.union(b).fraction, [1, 0.5, 1])
    assert m.RegionMask(np.zeros(3), (1.0,)).is_empty()


def test_dilate_grows_by_whole_cells():
    frac = np.zeros(9)
    frac[4] = 0.3
    grown = m.RegionMask(frac, (1.0,)).dilate(2)
    np.testing.assert_array_equal(grown.nodes, [0, 0, 1, 1, 1, 1, 1, 0, 0])
    assert grown.fraction[4] == 0.3 and grown.fraction[2] == 1.0


def test_gamma_plus_on_interval():
    grid = m.build_grid(unit_interval(-0.5), 1.0, 11)
    gp = m.gamma_plus(grid)
    assert list(np.nonzero(gp.nodes)[0]) == [10]


def test_gamma_plus_on_box():
    grid = m.build_grid(unit_box(), 1.0, 6)
    gp = m.gamma_plus(grid).nodes
    # the corner (0, 1) takes the normal of the x = 0 face
    assert np.all(gp[-1, :]) and np.all(gp[1:, -1]) and not gp[0, -1]
    assert not np.any(gp[1:-1, 1:-1]) and not np.any(gp[0, :-1]) and not np.any(gp[:-1, 0])


def test_outward_normals_are_unit_on_boundary():
    grid = m.build_grid(unit_box(), 1.0, 5)
    nrm = np.linalg.norm(m.outward_normals(grid), axis=-1)
    assert np.all(nrm[0] == 1) and np.all(nrm[1:-1, 1:-1] == 0)


@pytest.mark.parametrize("sigma", [0.1, 0.3, 0.55])
def test_omega_region_measure_on_interval(sigma):
    grid = m.build_grid(unit_interval(), 1.0, 201)
    om = m.omega_region(grid, m.gamma_plus(grid), sigma)
    assert m.integrate(1.0, om) == pytest.approx(sigma, abs=grid.h[0] / 4)


def test_omega_region_measure_on_box():
    grid = m.build_grid(unit_box(), 1.0, 81)
    om = m.omega_region(grid, m.gamma_plus(grid), 0.2)
    # union of two strips of width 0.2 in the unit square
    assert m.integrate(1.0, om) == pytest.approx(0.36, abs=5e-3)


def test_omega_region_rejects_bad_sigma():
    grid = m.build_grid(unit_interval(), 1.0, 11)
    with pytest.raises(ValueError):
        m.omega_region(grid, m.gamma_plus(grid), 0.0)


def test_empty_gamma_warns():
    grid = m.build_grid(unit_interval(0.5), 1.0, 11)
    empty = m.RegionMask(np.zeros(11), grid.h)
    with pytest.warns(UserWarning):
        assert m.omega_region(grid, empty, 0.2).is_empty()


def test_cone_region_measure():
    # |x + 0.5| > |t| over t in (-1, 1), x in (0, 1): area 2 minus two triangles of area 1/8
    grid = m.build_grid(unit_interval(-0.5), 1.0, 101)
    cone = m.cone_regions(grid, fractions=True)
    assert m.integrate(1.0, cone) == pytest.approx(1.75, abs=2e-3)


def test_poisson_dual_norm_of_sine_mode():
    grid = m.build_grid(unit_interval(), 1.0, 51)
    x = grid.axes()[0][1:-1]
    h = grid.h[0]
    eig = 4 / h**2 * math.sin(math.pi * h / 2) ** 2
    dual = m.poisson_solver(grid).dual_norm_sq(np.sin(math.pi * x))
    assert dual == pytest.approx(0.5 / eig, rel=1e-12)


def test_poisson_summation_by_parts():
    grid = m.build_grid(unit_box(), 1.0, (13, 17))
    solver = m.poisson_solver(grid)
    phi = np.random.default_rng(1).normal(size=grid.interior_shape)
    assert solver.grad_norm_sq(solver.solve(phi)) == pytest.approx(solver.dual_norm_sq(phi), rel=1e-10)


def test_poisson_apply_inverts_solve():
    grid = m.build_grid(unit_box(), 1.0, 9)
    solver = m.poisson_solver(grid)
    phi = np.random.default_rng(2).normal(size=(3,) + grid.interior_shape)
    np.testing.assert_allclose(solver.apply(solver.solve(phi)), phi, atol=1e-10)


def test_norms_accept_full_or_interior_arrays():
    grid = m.build_grid(unit_interval(), 1.0, 21)
    vals = np.sin(np.pi * grid.axes()[0])
    assert m.l2_norm(vals, grid) == pytest.approx(m.l2_norm(vals[1:-1], grid))
    assert m.h_minus1_norm(vals, grid) == pytest.approx(m.h_minus1_norm(vals[1:-1], grid))
    assert m.l2_norm(vals, grid) == pytest.approx(math.sqrt(0.5), rel=1e-12)


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.integers(5, 30))
def test_difference_stencils_exact_on_cubics(coef, count):
    x = np.linspace(0, 1, count)
    h = x[1] - x[0]
    p = np.polynomial.Polynomial(coef)
    np.testing.assert_allclose(m.diff2(p(x), 0, h), p.deriv(2)(x), atol=1e-6 * (1 + np.abs(coef).max()))
    quad = np.polynomial.Polynomial(coef[:3])
    np.testing.assert_allclose(m.diff1(quad(x), 0, h), quad.deriv()(x), atol=1e-8 * (1 + np.abs(coef).max()))
