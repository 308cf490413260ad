import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carleman_lab import carleman_verify as cv
from carleman_lab.geometry import CarlemanParams, ParameterRegimeError
from carleman_lab.mesh import SpatialDomain, build_grid
from carleman_lab.wave import TwoTimeField

R = 2.0
DOMAIN = SpatialDomain.interval(1.0, 2.0, 0.0)


@pytest.fixture(scope="module")
def setting():
    grid = build_grid(DOMAIN, R, 11)
    times = cv.two_time_axis(R, grid.h_min)
    masks = cv.carleman_masks(grid, times)
    return grid, times, masks, cv.default_params(R)


def bump(setting, seed=0, cone_power=0):
    grid, times, _, _ = setting
    rng = np.random.default_rng(seed)
    return cv.bump_field(grid, times, [1.0, rng.uniform(-1, 1), rng.uniform(-1, 1)],
                         rng.uniform(0.5, 2, 2), rng.uniform(0, 6, 2), cone_power)


def test_default_params():
    p = cv.default_params(R)
    assert (p.a, p.b) == (40, 0.05) and p.epsilon == pytest.approx(0.005)
    assert cv.default_params(R, b=0.1).b == 0.1


def test_two_time_axis_spacing():
    t = cv.two_time_axis(2.0, 0.1)
    assert t.size == 41 and t[0] == -2 and t[-1] == 2


def test_masks_exclude_cone_interior_and_apex(setting):
    grid, times, masks, _ = setting
    t1, t2 = np.meshgrid(times, times, indexing="ij")
    tau = np.hypot(t1, t2)[..., None]
    r = grid.axes()[0][None, None]
    assert not np.any(masks.region.nodes & (tau >= r))
    assert not np.any(masks.region.nodes & (tau < masks.exclusion))
    assert not np.any(masks.omega.nodes & ~masks.region.nodes)


def test_zero_field_has_zero_sides(setting):
    _, times, masks, params = setting
    z = TwoTimeField(np.zeros(masks.region.shape), times, setting[0])
    rep = cv.interior_sides(z, params, masks)
    assert rep.lhs_total == 0 and rep.rhs_total == 0
    with pytest.raises(ValueError, match="zero left-hand side"):
        cv.empirical_constant([z], params, masks, min_size=1)


@given(st.floats(1e-3, 1e3))
def test_sides_scale_quadratically(setting, scale):
    z = bump(setting)
    _, _, masks, params = setting
    base = cv.both_sides(z, params, masks)
    scaled = cv.both_sides(z.scaled(scale), params, masks)
    for a, b in zip(base, scaled):
        for key, value in a.entries().items():
            if key == "empirical_ratio":
                assert b.entries()[key] == pytest.approx(value, rel=1e-9)
            else:
                assert b.entries()[key] == pytest.approx(scale**2 * value, rel=1e-9, abs=1e-300)


def test_shared_pass_matches_separate_calls(setting):
    z = bump(setting, 1)
    _, _, masks, params = setting
    interior, boundary = cv.both_sides(z, params, masks)
    assert interior.entries() == cv.interior_sides(z, params, masks).entries()
    assert boundary.entries() == cv.boundary_sides(z, params, masks).entries()


def test_chunking_does_not_change_results(setting):
    z = bump(setting, 2)
    _, _, masks, params = setting
    a = cv.interior_sides(z, params, masks, chunk=5).entries()
    b = cv.interior_sides(z, params, masks, chunk=64).entries()
    for key in a:
        assert a[key] == pytest.approx(b[key], rel=1e-12)


def test_spatial_angular_term_vanishes_in_one_dimension(setting):
    dens = cv.first_order_density(bump(setting, 3))
    assert np.nanmax(np.abs(dens["spatial_angular"])) <= 1e-12 * np.nanmax(dens["u_du_sq"])


def test_temporal_angular_term_small_for_radial_field(setting):
    grid, times, _, _ = setting
    t1, t2 = np.meshgrid(times, times, indexing="ij")
    tau = np.hypot(t1, t2)
    x = grid.axes()[0]
    values = np.cos(tau)[..., None] * np.sin(np.pi * (x - 1))[None, None]
    dens = cv.first_order_density(TwoTimeField(values, times, grid))
    ang = np.abs(dens["temporal_angular"])[tau > 0.5]
    assert np.max(ang) <= 0.05 * np.nanmax(dens["u_du_sq"] + dens["v_dv_sq"])


def test_density_at_single_node(setting):
    z = bump(setting, 4)
    full = cv.first_order_density(z)
    point = cv.first_order_density(z, (30, 25, 5))
    assert point["u_du_sq"] == full["u_du_sq"][30, 25, 5]


def test_boundary_term_signs(setting):
    # on [1, 2] with x0 = 0 the face x = 2 points away from x0 and x = 1 towards it
    _, _, masks, params = setting
    for seed in range(3):
        terms = cv.boundary_sides(bump(setting, seed), params, masks).rhs_terms
        assert terms["boundary_gamma_plus"] > 0 > terms["boundary_gamma_minus"]


def test_f_cut_localizes(setting):
    z = bump(setting, 5)
    _, _, masks, params = setting
    values = [cv.interior_sides(z, params, masks, f_cut=c).lhs_total for c in (0.0, 0.1, 0.3, 0.6)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    # nothing on the active region has f above (r_max^2)/4 = 1
    assert cv.interior_sides(z, params, masks, f_cut=1.01).lhs_total == 0


def test_empirical_constant_single_member_and_scaling(setting):
    z = bump(setting, 6)
    _, _, masks, params = setting
    single = cv.empirical_constant([z], params, masks, min_size=1)
    assert single == pytest.approx(cv.interior_sides(z, params, masks).empirical_ratio)
    scaled = cv.empirical_constant([z.scaled(7.0)], params, masks, min_size=1)
    assert scaled == pytest.approx(single, rel=1e-10)
    with pytest.raises(ValueError, match="at least"):
        cv.empirical_constant([z], params, masks)


def test_family_ratios_positive(setting):
    grid, times, masks, params = setting
    family = cv.verification_family(grid, times, bumps=3, lifts=3)
    ratios = cv.family_ratios(family, params, masks)
    assert all(r > 0 for r in ratios["interior"])
    assert len(ratios["boundary"]) == 6


def test_regime_violation_rejected(setting):
    _, _, masks, _ = setting
    bad = CarlemanParams(a=40, b=0.6, epsilon=0.005, R=R)
    with pytest.raises(ParameterRegimeError):
        cv.interior_sides(bump(setting), bad, masks)


def test_field_must_vanish_on_boundary(setting):
    grid, times, masks, params = setting
    with pytest.raises(ValueError, match="vanish"):
        cv.interior_sides(TwoTimeField(np.ones(masks.region.shape), times, grid), params, masks)


def test_cone_power_field_vanishes_on_cone(setting):
    z = bump(setting, 7, cone_power=2)
    grid, times, _, _ = setting
    t1, t2 = np.meshgrid(times, times, indexing="ij")
    r = grid.axes()[0]
    on_cone = np.isclose(np.hypot(t1, t2)[..., None], r[None, None] * np.ones_like(t1)[..., None])
    assert np.all(np.abs(z.values[on_cone]) <= 1e-12)


def test_trajectory_family_axis_checks(setting):
    grid = setting[0]
    with pytest.raises(ValueError):
        cv.trajectory_family(grid, np.linspace(-1, 1, 11), 1, np.random.default_rng(0))
