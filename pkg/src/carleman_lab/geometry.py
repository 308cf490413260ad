"""Null-cone geometry, the warped metric, its conformal map and the Carleman weight.

Every function accepts batched points: ``t`` has shape ``(..., m)`` and ``x``
has shape ``(..., n)``.  The finite-difference checks run in ``np.longdouble``
so that truncation error, not roundoff, is what gets measured.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ParameterRegimeError(ValueError):
    """Raised when (a, b, epsilon, R) leave the admissible ordering."""


class ChartError(ValueError):
    """Raised when a point or a finite-difference stencil leaves the valid chart."""


@dataclass(frozen=True)
class Dimensions:
    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"need m, n >= 1, got m={self.m}, n={self.n}")

    @property
    def total(self) -> int:
        return self.m + self.n


def _as_float(a):
    a = np.asarray(a)
    if a.dtype == np.longdouble:
        return a
    return a.astype(np.float64)


@dataclass(frozen=True, eq=False)
class SpacetimePoint:
    t: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(_as_float(self.t))
        x = np.atleast_1d(_as_float(self.x))
        if t.shape[:-1] != x.shape[:-1]:
            raise ValueError("t and x batch shapes differ")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x))):
            raise ValueError("non-finite coordinates")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.t.shape[-1], self.x.shape[-1])

    def __sub__(self, other: "SpacetimePoint") -> "SpacetimePoint":
        return SpacetimePoint(self.t - other.t, self.x - other.x)


@dataclass(frozen=True, eq=False)
class NullFrame:
    tau: np.ndarray
    r: np.ndarray
    u: np.ndarray
    v: np.ndarray
    f: np.ndarray
    omega_t: np.ndarray
    omega_x: np.ndarray
    dims: Dimensions

    @property
    def inside(self):
        """True where the point lies strictly outside the null cone (f > 0)."""
        return self.f > 0


def _radius(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def _unit(a, radius):
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a / radius[..., None]
    return np.where(radius[..., None] > 0, out, np.nan)


def null_frame(p: SpacetimePoint) -> NullFrame:
    tau = _radius(p.t)
    r = _radius(p.x)
    u = (tau - r) / 2
    v = (tau + r) / 2
    return NullFrame(tau=tau, r=r, u=u, v=v, f=-u * v,
                     omega_t=_unit(p.t, tau), omega_x=_unit(p.x, r), dims=p.dims)


def rho_bar(u, v, epsilon):
    return (v - u) - 2 * epsilon * u * v


def xi_factor(u, v, epsilon):
    return (1 + epsilon * u) * (1 - epsilon * v)


@dataclass(frozen=True, eq=False)
class WarpedScalars:
    rho_bar: np.ndarray
    xi: np.ndarray
    xi_expanded: np.ndarray
    h_bar: np.ndarray
    w_bar: np.ndarray
    defined: np.ndarray


def warped_scalars(frame: NullFrame, epsilon: float) -> WarpedScalars:
    n, m = frame.dims.n, frame.dims.m
    rb = frame.r + 2 * epsilon * frame.f
    xi = xi_factor(frame.u, frame.v, epsilon)
    xi_alt = 1 - epsilon * frame.r + epsilon**2 * frame.f
    scale = np.maximum(np.abs(xi), 1.0)
    if np.any(np.abs(xi - xi_alt) > 1e-12 * scale):
        raise ArithmeticError("product and expanded forms of xi disagree")
    defined = rb != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(defined, epsilon * frame.f / rb, np.nan)
    h_bar = 0.5 + ratio / 2
    w_bar = (n + m - 2) / 4 + (n - 2) * ratio / 2
    return WarpedScalars(rho_bar=rb, xi=xi, xi_expanded=xi_alt,
                         h_bar=h_bar, w_bar=w_bar, defined=defined)


def _from_polar(tau, r, omega_t, omega_x):
    return tau[..., None] * omega_t, r[..., None] * omega_x


def _safe_directions(p: SpacetimePoint, frame: NullFrame):
    # Directions are irrelevant when the matching radius vanishes; any unit vector works.
    wt = np.where(np.isnan(frame.omega_t), 0.0, frame.omega_t)
    wx = np.where(np.isnan(frame.omega_x), 0.0, frame.omega_x)
    return wt, wx


def conformal_map(p: SpacetimePoint, epsilon: float, check: bool = True) -> SpacetimePoint:
    """Warped-to-flat conformal map acting only on the null coordinates."""
    fr = null_frame(p)
    if check and np.any(fr.f <= 0):
        raise ChartError("conformal_map requires points outside the null cone")
    du = 1 + epsilon * fr.u
    dv = 1 - epsilon * fr.v
    if np.any(du == 0) or np.any(dv == 0):
        raise ChartError("conformal_map is singular at this point")
    ub, vb = fr.u / du, fr.v / dv
    wt, wx = _safe_directions(p, fr)
    t, x = _from_polar(ub + vb, vb - ub, wt, wx)
    return SpacetimePoint(t, x)


def inverse_conformal_map(q: SpacetimePoint, epsilon: float) -> SpacetimePoint:
    fr = null_frame(q)
    u = fr.u / (1 - epsilon * fr.u)
    v = fr.v / (1 + epsilon * fr.v)
    wt, wx = _safe_directions(q, fr)
    t, x = _from_polar(u + v, v - u, wt, wx)
    return SpacetimePoint(t, x)


# ---------------------------------------------------------------------------
# Carleman weight


@dataclass(frozen=True)
class CarlemanParams:
    a: float
    b: float
    epsilon: float
    R: float
    dims: Dimensions = field(default_factory=lambda: Dimensions(2, 1))

    def __post_init__(self):
        if self.a <= 0 or self.b < 0 or self.epsilon < 0 or self.R <= 0:
            raise ParameterRegimeError(
                f"need a > 0, b >= 0, epsilon >= 0, R > 0 (got a={self.a}, b={self.b}, "
                f"epsilon={self.epsilon}, R={self.R})")

    @classmethod
    def from_delta(cls, R, dims=Dimensions(2, 1), delta=0.1, a_scale=20.0, a=None):
        """Concrete parameters: epsilon = delta^2/R, b = delta/R, a = max((m+n)^2, ceil(s R))."""
        if a is None:
            a = max(dims.total**2, math.ceil(a_scale * R))
        return cls(a=float(a), b=delta / R, epsilon=delta**2 / R, R=float(R), dims=dims)

    def check_regime(self, kappa1=10.0, kappa2=10.0):
        if kappa1 < 10 or kappa2 < 10:
            raise ParameterRegimeError("separation factors must be at least 10")
        tol = 1e-12
        problems = []
        if self.b * self.R > 1:
            problems.append(f"b*R = {self.b * self.R:.6g} exceeds 1")
        if self.b > (1 + tol) / (kappa2 * self.R):
            problems.append(f"b = {self.b:.6g} > 1/(kappa2 R) = {1 / (kappa2 * self.R):.6g}")
        if self.epsilon > (1 + tol) * self.b / kappa1:
            problems.append(f"epsilon = {self.epsilon:.6g} > b/kappa1 = {self.b / kappa1:.6g}")
        if self.a < self.dims.total**2:
            problems.append(f"a = {self.a:.6g} < (m+n)^2 = {self.dims.total**2}")
        if problems:
            raise ParameterRegimeError("parameter regime violated: " + "; ".join(problems))
        return self


def log_carleman_weight(p: SpacetimePoint, center: SpacetimePoint | None, params: CarlemanParams):
    """Logarithm of the weight; ``-inf`` on and inside the null cone."""
    q = p if center is None else p - center
    fr = null_frame(q)
    eps, a, b = params.epsilon, params.a, params.b
    inside = fr.f > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        fpos = np.where(inside, fr.f, 1.0)
        core = np.log(fpos) - np.log(xi_factor(fr.u, fr.v, eps))
        core = core + 2 * b * np.sqrt(fpos / ((1 - eps * fr.u) * (1 + eps * fr.v)))
    return np.where(inside, 2 * a * core, -np.inf)


def carleman_weight(p: SpacetimePoint, center: SpacetimePoint | None, params: CarlemanParams):
    return np.exp(log_carleman_weight(p, center, params))


def weight_gradient_ratio(p: SpacetimePoint, params: CarlemanParams,
                          center: SpacetimePoint | None = None, fd_step: float = 1e-5):
    """max over Cartesian directions of |d zeta| f / (a R zeta), by central differences of log zeta."""
    q = p if center is None else p - center
    fr = null_frame(q)
    if np.any(fr.f <= 0):
        raise ChartError("weight_gradient_ratio needs points outside the null cone")
    coords = np.concatenate([q.t, q.x], axis=-1)
    m = q.t.shape[-1]
    best = np.zeros(fr.f.shape)
    for j in range(coords.shape[-1]):
        vals = []
        for s in (+1, -1):
            c = coords.copy()
            c[..., j] += s * fd_step
            pt = SpacetimePoint(c[..., :m], c[..., m:])
            if np.any(null_frame(pt).f <= 0):
                raise ChartError("finite-difference stencil leaves the cone exterior")
            vals.append(log_carleman_weight(pt, None, params))
        dlog = (vals[0] - vals[1]) / (2 * fd_step)
        best = np.maximum(best, np.abs(dlog))
    return best * fr.f / (params.a * params.R)


@dataclass(frozen=True)
class MonotonicityCheck:
    decreasing: bool
    equal: bool
    ratio_small: float
    ratio_large: float

    def __bool__(self):
        return self.decreasing


def _time_profile(t1, t2, x, params):
    p = SpacetimePoint(np.stack([np.asarray(t1, float), np.broadcast_to(t2, np.shape(t1))], -1), x)
    fr = null_frame(p)
    eps = params.epsilon
    ratio = fr.f / xi_factor(fr.u, fr.v, eps)
    log_zf = log_carleman_weight(p, None, params) + np.log(np.where(fr.f > 0, fr.f, np.nan))
    return fr, ratio, log_zf


def weight_time_monotonicity(t_small, t_large, t2, x, params: CarlemanParams) -> MonotonicityCheck:
    """Compare f/xi and zeta*f at two first-time values with t_small^2 <= t_large^2."""
    if params.dims.m != 2:
        raise ValueError("monotonicity in the first time variable needs m = 2")
    if t_small**2 > t_large**2:
        raise ValueError("need t_small^2 <= t_large^2")
    x = np.atleast_1d(np.asarray(x, float))
    r = float(np.sqrt(x @ x))
    if params.epsilon * r >= 1:
        raise ParameterRegimeError("need epsilon * r < 1")
    fr, ratio, log_zf = _time_profile(np.array([t_small, t_large]), t2,
                                      np.broadcast_to(x, (2, x.size)), params)
    if np.any(fr.f <= 0):
        raise ChartError("both points must lie outside the null cone")
    equal = bool(ratio[0] == ratio[1])
    decreasing = bool(ratio[0] > ratio[1] and log_zf[0] > log_zf[1])
    return MonotonicityCheck(decreasing, equal, float(ratio[0]), float(ratio[1]))


def monotonicity_sweep(params: CarlemanParams, count: int, rng: np.random.Generator,
                       margin: float = 1e-6):
    """Sample admissible triples and count violations of the decrease in t^2."""
    n = params.dims.n
    R = params.R
    r = rng.uniform(0.05 * R, R, count)
    directions = rng.normal(size=(count, n))
    x = directions / np.linalg.norm(directions, axis=1, keepdims=True) * r[:, None]
    # pick t2 and two values of |t1| with t1^2 + t2^2 < r^2 on both
    t2 = rng.uniform(-1, 1, count) * r * 0.95
    room = np.sqrt(r**2 - t2**2)
    lo, hi = np.sort(rng.uniform(0, 0.999, (2, count)) * room, axis=0)
    hi = np.maximum(hi, np.sqrt(lo**2 + margin * r**2))
    keep = hi**2 + t2**2 < r**2
    sign_lo = rng.choice([-1.0, 1.0], count)
    sign_hi = rng.choice([-1.0, 1.0], count)
    t_small, t_large = (sign_lo * lo)[keep], (sign_hi * hi)[keep]
    t2, x = t2[keep], x[keep]
    _, ratio_s, lz_s = _time_profile(t_small, t2, x, params)
    _, ratio_l, lz_l = _time_profile(t_large, t2, x, params)
    ok = (ratio_s > ratio_l) & (lz_s > lz_l)
    return int(keep.sum()), int((~ok).sum())


# ---------------------------------------------------------------------------
# Warped operators in (u, v, omega_x, omega_t) coordinates


def _normalize(w):
    return w / np.sqrt(np.sum(w * w, axis=-1))[..., None]


def _sphere_laplacian(G, base_args, slot, h):
    """Laplace-Beltrami on the unit sphere through the 0-homogeneous extension.

    ``base_args`` is the tuple (u, v, wx, wt); ``slot`` is 2 for wx, 3 for wt.
    """
    w = base_args[slot]
    g0 = G(*base_args)
    total = np.zeros_like(g0)
    for j in range(w.shape[-1]):
        step = np.zeros_like(w)
        step[..., j] = h
        args_p = list(base_args)
        args_m = list(base_args)
        args_p[slot] = _normalize(w + step)
        args_m[slot] = _normalize(w - step)
        total = total + (G(*args_p) - 2 * g0 + G(*args_m)) / h**2
    return total


class WarpedChart:
    """Central-difference calculus for scalars G(u, v, omega_x, omega_t)."""

    def __init__(self, dims: Dimensions, epsilon: float):
        self.dims = dims
        self.epsilon = epsilon

    def rho(self, u, v):
        return rho_bar(u, v, self.epsilon)

    def derivatives(self, G, u, v, wx, wt, h):
        gp = lambda du, dv: G(u + du, v + dv, wx, wt)
        g0 = G(u, v, wx, wt)
        gu = (gp(h, 0) - gp(-h, 0)) / (2 * h)
        gv = (gp(0, h) - gp(0, -h)) / (2 * h)
        guu = (gp(h, 0) - 2 * g0 + gp(-h, 0)) / h**2
        gvv = (gp(0, h) - 2 * g0 + gp(0, -h)) / h**2
        guv = (gp(h, h) - gp(h, -h) - gp(-h, h) + gp(-h, -h)) / (4 * h**2)
        lap_x = _sphere_laplacian(G, (u, v, wx, wt), 2, h)
        lap_t = _sphere_laplacian(G, (u, v, wx, wt), 3, h)
        return dict(g=g0, u=gu, v=gv, uu=guu, vv=gvv, uv=guv, lap_x=lap_x, lap_t=lap_t)

    def box_from(self, d, u, v):
        n, m, eps = self.dims.n, self.dims.m, self.epsilon
        rb = self.rho(u, v)
        tau = u + v
        out = -d["uv"] + d["lap_x"] / rb**2 - d["lap_t"] / tau**2
        out = out - (n - 1) * (1 - 2 * eps * u) / (2 * rb) * d["u"]
        out = out + (n - 1) * (1 + 2 * eps * v) / (2 * rb) * d["v"]
        out = out - (m - 1) / (2 * tau) * (d["u"] + d["v"])
        return out

    def box(self, G, u, v, wx, wt, h):
        return self.box_from(self.derivatives(G, u, v, wx, wt, h), u, v)

    def spatial_sphere_scale(self, d, u, v):
        """Common factor c with Hess_ab = c * gbar_ab, from the Christoffels and the sphere trace."""
        n, eps = self.dims.n, self.epsilon
        rb = self.rho(u, v)
        out = -(1 - 2 * eps * u) / (2 * rb) * d["u"] + (1 + 2 * eps * v) / (2 * rb) * d["v"]
        if n > 1:
            out = out + d["lap_x"] / ((n - 1) * rb**2)
        return out

    def temporal_sphere_scale(self, d, u, v):
        m = self.dims.m
        tau = u + v
        out = -(d["u"] + d["v"]) / (2 * tau)
        if m > 1:
            out = out - d["lap_t"] / ((m - 1) * tau**2)
        return out


def frame_coefficients(u, v):
    """(T^u, T^v) and (N^u, N^v) of the unit timelike/spacelike frame."""
    s = 1 / (2 * np.sqrt(-u * v))
    return (-u * s, v * s), (u * s, v * s)


@dataclass(frozen=True, eq=False)
class WarpedFrameFields:
    T_coeffs: tuple
    N_coeffs: tuple
    christoffels: dict
    pi_components: dict


def warped_frame_fields(frame: NullFrame, epsilon: float) -> WarpedFrameFields:
    u, v, f = frame.u, frame.v, frame.f
    rb = rho_bar(u, v, epsilon)
    tau = frame.tau
    chris = {
        # Gamma^u_ab / gbar_ab and friends; angular index structure is implied
        "u_ab_scale": (1 - 2 * epsilon * u) / (2 * rb),
        "v_ab_scale": -(1 + 2 * epsilon * v) / (2 * rb),
        "u_CD_scale": 1 / (2 * tau),
        "v_CD_scale": 1 / (2 * tau),
        "a_ub": -(1 + 2 * epsilon * v) / rb,
        "a_vb": (1 - 2 * epsilon * u) / rb,
        "C_uD": 1 / tau,
        "C_vD": 1 / tau,
    }
    half = epsilon * f / (2 * rb)
    pi = {"TT": half, "NN": -half, "TN": 0 * half, "ab_scale": half, "CD_scale": -half}
    T, N = frame_coefficients(u, v)
    return WarpedFrameFields(T_coeffs=T, N_coeffs=N, christoffels=chris, pi_components=pi)


@dataclass(frozen=True, eq=False)
class IdentityResiduals:
    analytic: dict
    numeric: dict
    residual: dict
    bounds: dict

    def max_residual(self):
        return max(float(np.max(r)) for r in self.residual.values())


def _analytic_identities(dims, eps, u, v):
    n, m = dims.n, dims.m
    f = -u * v
    r = v - u
    rb = rho_bar(u, v, eps)
    half = eps * f / (2 * rb)
    out = {
        "grad_u": u / 2,
        "grad_v": v / 2,
        "grad_norm": f,
        "hess_uv": -np.ones_like(u),
        "hess_ab_scale": 0.5 + eps * f / rb,
        "hess_CD_scale": 0.5 * np.ones_like(u),
        "hess_TT": -0.5 * np.ones_like(u),
        "hess_NN": 0.5 * np.ones_like(u),
        "hess_TN": np.zeros_like(u),
        "box_f": (n + m) / 2 + (n - 1) * eps * f / rb,
        "box_f_over_rho": -(n - 3) * f / rb**3 + (n + m - 2) * r / (2 * rb**2),
        "box_w": -(n - 2) * eps / (2 * rb) * ((n - 3) * f / rb**2 - (n + m - 2) * r / (2 * rb)),
        "pi_TT": half,
        "pi_NN": -half,
        "pi_TN": np.zeros_like(u),
        "pi_ab_scale": half,
        "pi_CD_scale": -half,
    }
    if n == 1:
        for key in ("hess_ab_scale", "pi_ab_scale"):
            out.pop(key)
    if m == 1:
        for key in ("hess_CD_scale", "pi_CD_scale"):
            out.pop(key)
    return out


def _identity_numerics(dims, eps, u, v, wx, wt, h):
    chart = WarpedChart(dims, eps)
    n, m = dims.n, dims.m
    f_fn = lambda uu, vv, a, b: -uu * vv
    fr_fn = lambda uu, vv, a, b: -uu * vv / rho_bar(uu, vv, eps)
    w_fn = lambda uu, vv, a, b: (n + m - 2) / 4 + (n - 2) * eps * (-uu * vv) / (2 * rho_bar(uu, vv, eps))
    d = chart.derivatives(f_fn, u, v, wx, wt, h)
    (Tu, Tv), (Nu, Nv) = frame_coefficients(u, v)
    # Gamma^c_{uu}, Gamma^c_{uv}, Gamma^c_{vv} vanish, so the null block of the Hessian is plain
    hess = lambda au, av, bu, bv: au * bu * d["uu"] + (au * bv + av * bu) * d["uv"] + av * bv * d["vv"]
    h_bar = 0.5 + eps * (-u * v) / (2 * rho_bar(u, v, eps))
    tt, nn, tn = hess(Tu, Tv, Tu, Tv), hess(Nu, Nv, Nu, Nv), hess(Tu, Tv, Nu, Nv)
    out = {
        "grad_u": -0.5 * d["v"],
        "grad_v": -0.5 * d["u"],
        "grad_norm": -d["u"] * d["v"],
        "hess_uv": d["uv"],
        "hess_TT": tt,
        "hess_NN": nn,
        "hess_TN": tn,
        "box_f": chart.box_from(d, u, v),
        "box_f_over_rho": chart.box(fr_fn, u, v, wx, wt, h),
        "box_w": chart.box(w_fn, u, v, wx, wt, h),
        # g(T,T) = -1, g(N,N) = 1, g(T,N) = 0
        "pi_TT": tt + h_bar,
        "pi_NN": nn - h_bar,
        "pi_TN": tn,
    }
    if n > 1:
        ab = chart.spatial_sphere_scale(d, u, v)
        out["hess_ab_scale"] = ab
        out["pi_ab_scale"] = ab - h_bar
    if m > 1:
        cd = chart.temporal_sphere_scale(d, u, v)
        out["hess_CD_scale"] = cd
        out["pi_CD_scale"] = cd - h_bar
    return out


def _check_chart(fr: NullFrame, h):
    if np.any(fr.f <= 0):
        raise ChartError("identity checks need points outside the null cone")
    if np.any(fr.tau <= 2 * h) or np.any(fr.r <= 2 * h):
        raise ChartError("polar chart degenerates inside the finite-difference stencil")


def warped_identity_residuals(p: SpacetimePoint, epsilon: float, fd_step: float = 1e-3) -> IdentityResiduals:
    """Finite-difference check of the gradient, Hessian, wave-operator and deformation identities."""
    ld = np.longdouble
    p = SpacetimePoint(np.asarray(p.t, ld), np.asarray(p.x, ld))
    fr = null_frame(p)
    _check_chart(fr, fd_step)
    dims = p.dims
    eps = ld(epsilon)
    h = ld(fd_step)
    u, v = fr.u, fr.v
    analytic = _analytic_identities(dims, eps, u, v)
    numeric = _identity_numerics(dims, eps, u, v, fr.omega_x, fr.omega_t, h)
    residual = {k: np.abs(numeric[k] - analytic[k]).astype(np.float64) for k in analytic}
    rb = rho_bar(u, v, eps)
    bounds = {
        "minus_u_in_(0,r)": (0 < -u) & (-u < fr.r),
        "v_in_(0,r)": (0 < v) & (v < fr.r),
        "f_in_(0,r^2)": (0 < fr.f) & (fr.f < fr.r**2),
        "sqrt_f_below_rho": np.sqrt(fr.f) < rb,
    }
    return IdentityResiduals(
        analytic={k: np.asarray(a, np.float64) for k, a in analytic.items()},
        numeric={k: np.asarray(a, np.float64) for k, a in numeric.items()},
        residual=residual, bounds=bounds)


def sample_cone_points(dims: Dimensions, count: int, rng: np.random.Generator,
                       R: float = 5.0, r_min: float = 0.5, tau_min: float = 0.01,
                       cone_margin: float = 0.98) -> SpacetimePoint:
    """Random points with tau_min < tau < cone_margin * r and r_min <= r < R."""
    r = rng.uniform(r_min, R, count)
    tau = rng.uniform(tau_min, 1.0, count) * cone_margin * r
    tau = np.maximum(tau, tau_min * 1.0001)
    wt = rng.normal(size=(count, dims.m))
    wx = rng.normal(size=(count, dims.n))
    wt /= np.linalg.norm(wt, axis=1, keepdims=True)
    wx /= np.linalg.norm(wx, axis=1, keepdims=True)
    return SpacetimePoint(tau[:, None] * wt, r[:, None] * wx)


@dataclass(frozen=True, eq=False)
class IdentitySweep:
    dims: Dimensions
    epsilon: float
    coarse: IdentityResiduals
    fine: IdentityResiduals
    roundoff_floor: float

    def max_residual(self):
        return self.coarse.max_residual()

    def order_ratios(self):
        """Per identity: ratios coarse/fine where the coarse residual exceeds the roundoff floor."""
        out = {}
        for key, res in self.coarse.residual.items():
            active = res > self.roundoff_floor
            out[key] = res[active] / self.fine.residual[key][active]
        return out

    def ratio_range(self):
        vals = [r for r in self.order_ratios().values() if r.size]
        if not vals:
            return (float("nan"), float("nan"))
        allr = np.concatenate(vals)
        return float(allr.min()), float(allr.max())

    def bounds_hold(self):
        return all(bool(np.all(b)) for b in self.coarse.bounds.values())


def identity_sweep(dims: Dimensions, epsilon: float, count: int = 100, fd_step: float = 1e-3,
                   seed: int = 0, R: float = 5.0, roundoff_floor: float = 1e-10) -> IdentitySweep:
    rng = np.random.default_rng(seed)
    pts = sample_cone_points(dims, count, rng, R=R, tau_min=max(0.01, 10 * fd_step))
    coarse = warped_identity_residuals(pts, epsilon, fd_step)
    fine = warped_identity_residuals(pts, epsilon, fd_step / 2)
    return IdentitySweep(dims, epsilon, coarse, fine, roundoff_floor)


# ---------------------------------------------------------------------------
# Conformal checks


def conformal_jacobian(p: SpacetimePoint, epsilon: float):
    """Analytic Jacobian of the conformal map in Cartesian coordinates, shape (..., m+n, m+n)."""
    fr = null_frame(p)
    m, n = p.dims.m, p.dims.n
    du = 1 / (1 + epsilon * fr.u) ** 2
    dv = 1 / (1 - epsilon * fr.v) ** 2
    ub = fr.u / (1 + epsilon * fr.u)
    vb = fr.v / (1 - epsilon * fr.v)
    taub, rb = ub + vb, vb - ub
    dtau_dtau = (du + dv) / 2
    dtau_dr = (dv - du) / 2
    dr_dtau = (dv - du) / 2
    dr_dr = (du + dv) / 2
    wt, wx = fr.omega_t, fr.omega_x
    eye_t, eye_x = np.eye(m), np.eye(n)
    outer = lambda a, b: a[..., :, None] * b[..., None, :]
    s = lambda a: a[..., None, None]
    jtt = s(dtau_dtau) * outer(wt, wt) + s(taub / fr.tau) * (eye_t - outer(wt, wt))
    jtx = s(dtau_dr) * outer(wt, wx)
    jxt = s(dr_dtau) * outer(wx, wt)
    jxx = s(dr_dr) * outer(wx, wx) + s(rb / fr.r) * (eye_x - outer(wx, wx))
    top = np.concatenate([jtt, jtx], axis=-1)
    bottom = np.concatenate([jxt, jxx], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def warped_metric_cartesian(q: SpacetimePoint, epsilon: float):
    """Components of the warped metric at q in Cartesian coordinates."""
    fr = null_frame(q)
    m, n = q.dims.m, q.dims.n
    g = np.zeros(fr.f.shape + (m + n, m + n))
    g[..., :m, :m] = -np.eye(m)
    g[..., m:, m:] = np.eye(n)
    wx = fr.omega_x
    proj = np.eye(n) - wx[..., :, None] * wx[..., None, :]
    stretch = (rho_bar(fr.u, fr.v, epsilon) / fr.r) ** 2 - 1
    g[..., m:, m:] += stretch[..., None, None] * proj
    return g


@dataclass(frozen=True, eq=False)
class ConformalResiduals:
    pullback: np.ndarray
    wave_law: np.ndarray
    transform: dict
    xi_power: np.ndarray


def default_conformal_test_function(t, x):
    a = np.linspace(0.3, 0.7, t.shape[-1])
    b = np.linspace(0.9, 0.4, x.shape[-1])
    return np.cos(np.sum(t * a, -1) + np.sum(x * b, -1)) + 0.05 * np.sum(x * x, -1) * np.sum(t * t, -1)


def _lift(test_fn, eps, N):
    """G(ubar, vbar, wx, wt) = xi(preimage)^(N/2-1) * zbar(q)."""
    def G(ub, vb, wx, wt):
        pre = 1 / ((1 - eps * ub) * (1 + eps * vb))
        t, x = _from_polar(ub + vb, vb - ub, wt, wx)
        return pre ** (N / 2 - 1) * test_fn(t, x)
    return G


def _pullback(test_fn, eps):
    def Z(u, v, wx, wt):
        ub = u / (1 + eps * u)
        vb = v / (1 - eps * v)
        t, x = _from_polar(ub + vb, vb - ub, wt, wx)
        return test_fn(t, x)
    return Z


def conformal_residuals(p: SpacetimePoint, epsilon: float, test_fn=default_conformal_test_function,
                        fd_step: float = 1e-3) -> ConformalResiduals:
    dims = p.dims
    n, m = dims.n, dims.m
    N = dims.total
    fr = null_frame(p)
    _check_chart(fr, fd_step)
    ws = warped_scalars(fr, epsilon)

    # (i) pullback of the warped metric against xi^-2 times the flat metric
    q = conformal_map(p, epsilon)
    J = conformal_jacobian(p, epsilon)
    gq = warped_metric_cartesian(q, epsilon)
    pulled = np.einsum("...ai,...ab,...bj->...ij", J, gq, J)
    flat = np.zeros_like(pulled)
    flat[..., :m, :m] = -np.eye(m)
    flat[..., m:, m:] = np.eye(n)
    target = flat / ws.xi[..., None, None] ** 2
    pullback = np.max(np.abs(pulled - target), axis=(-1, -2))

    # (ii) conformal law for the wave operator, both sides in the same null chart
    ld = np.longdouble
    eps = ld(epsilon)
    h = ld(fd_step)
    u, v = np.asarray(fr.u, ld), np.asarray(fr.v, ld)
    wx, wt = np.asarray(fr.omega_x, ld), np.asarray(fr.omega_t, ld)
    ub, vb = u / (1 + eps * u), v / (1 - eps * v)
    warped = WarpedChart(dims, eps)
    flat_chart = WarpedChart(dims, ld(0))
    G = _lift(test_fn, eps, N)
    lhs = warped.box(G, ub, vb, wx, wt, h)
    lhs = lhs + (n - 1) * (N - 2) * eps / (2 * rho_bar(ub, vb, eps)) * G(ub, vb, wx, wt)
    xi = xi_factor(u, v, eps)
    rhs = xi ** (ld(N) / 2 + 1) * flat_chart.box(_pullback(test_fn, eps), u, v, wx, wt, h)
    wave_law = np.abs(lhs - rhs).astype(np.float64)

    # (iii) exact transformation of f, tau, rho_bar
    fq = null_frame(q)
    rel = lambda a, b: np.abs(a - b) / np.maximum(np.abs(b), 1e-300)
    transform = {
        "f": rel(fq.f, fr.f / ws.xi),
        "tau": rel(fq.tau, fr.tau / ws.xi),
        "rho_bar": rel(rho_bar(fq.u, fq.v, epsilon), fr.r / ws.xi),
    }
    return ConformalResiduals(pullback=pullback, wave_law=wave_law, transform=transform,
                              xi_power=ws.xi**N)
