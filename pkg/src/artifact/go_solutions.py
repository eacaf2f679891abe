"""Geometric-optics probes u0 = exp(i(psi - t)/h) alpha beta_A.

Everything is written in geodesic polar coordinates (r, theta) about a
base point y on the boundary of M1, where the metric is dr^2 + rho dtheta^2,
psi = r and the amplitudes are

    alpha = rho^(-1/4) phi_w(t - r) Psi(theta),
    beta_A = exp(-i S(r, theta)),   S = int_0^r <A, gamma'> dr'.

Writing u0 = p(t - r) G(r, theta) with p(s) = exp(-is/h) phi_w(s), the
second-order terms in p cancel by the eikonal equation and the first-order
ones by the transport equations, so the residual is p(t - r) E_{A,q} G.
"""

import json
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import beta as beta_fn

from .dtn import solve_wave
from .fields import OneFormField, ScalarField
from .geometry import GeometryError, polar_chart
from .raytransform import _crossings


class ResolutionError(ValueError):
    pass


# -- window ---------------------------------------------------------------------------

class Window:
    """phi_w(s) = C ((s - eps)(2 eps - s))^3 on (eps, 2 eps), unit L2 norm, C^2."""

    def __init__(self, eps):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)
        # ((s - eps)(2 eps - s))^3 = eps^6 (u (1 - u))^3 with u = (s - eps) / eps; mapped basis keeps it conditioned
        P = Polynomial([0.0, 1.0, -1.0], domain=[eps, 2 * eps], window=[0, 1]) ** 3
        C = 1.0 / np.sqrt(eps * beta_fn(7, 7))
        self.poly = C * P
        self._d = [self.poly, self.poly.deriv(1), self.poly.deriv(2)]

    def __call__(self, s, k=0):
        s = np.asarray(s, dtype=float)
        inside = (s > self.eps) & (s < 2 * self.eps)
        return np.where(inside, self._d[k](s), 0.0)

    def profile(self, s, h, k=0):
        """k-th derivative of p(s) = exp(-is/h) phi_w(s)."""
        e = np.exp(-1j * np.asarray(s) / h)
        f0, f1 = self(s, 0), self(s, 1)
        if k == 0:
            return e * f0
        if k == 1:
            return e * (f1 - 1j / h * f0)
        f2 = self(s, 2)
        return e * (f2 - 2j / h * f1 - f0 / h ** 2)


def default_eps(T, metric):
    """eps = (T - diam M1) / 4."""
    eps = (T - 2 * metric.radius_M1) / 4
    if eps <= 0:
        raise ValueError("T must exceed the diameter of M1")
    return eps


def fan_weight(kind="one"):
    """Psi(theta) with first and second derivatives: 'one', 'mu' or a callable."""
    if callable(kind):
        return kind
    if kind == "one":
        return lambda th: (np.ones_like(th), np.zeros_like(th), np.zeros_like(th))
    if kind == "mu":
        return lambda th: (np.cos(th), -np.sin(th), -np.cos(th))
    raise ValueError(f"unknown fan weight {kind!r}")


# -- polar geometry ------------------------------------------------------------------

class PolarGeometry:
    """Position, velocity, Jacobi field and rho at (r, theta) about y.

    Closed form for the euclidean metric, quintic chart splines otherwise.
    """

    def __init__(self, metric, y, chart=None):
        self.metric = metric
        self.y = np.asarray(y, dtype=float)
        self.euclid = metric.kind == "euclidean"
        self.e1, self.e2 = metric.inward_frame(self.y)
        self.chart = None if self.euclid else (chart or polar_chart(metric, self.y))

    def at(self, r, th):
        r = np.asarray(r, dtype=float)
        th = np.asarray(th, dtype=float)
        if self.euclid:
            d = np.cos(th)[..., None] * self.e1 + np.sin(th)[..., None] * self.e2
            dp = -np.sin(th)[..., None] * self.e1 + np.cos(th)[..., None] * self.e2
            x = self.y + r[..., None] * d
            z = np.zeros_like(r)
            return {"x": x, "v": d, "J": r[..., None] * dp, "rho": r ** 2, "rho_r": 2 * r,
                    "rho_rr": 2 + z, "rho_t": z, "rho_tt": z}
        c = self.chart
        sx = c._sx
        x = np.stack([s.ev(th, r) for s in sx], axis=-1)
        v = np.stack([s.ev(th, r, dy=1) for s in sx], axis=-1)
        J = np.stack([s.ev(th, r, dx=1) for s in sx], axis=-1)
        sr = c._rho_spline()
        return {"x": x, "v": v, "J": J, "rho": sr.ev(th, r), "rho_r": sr.ev(th, r, dy=1),
                "rho_rr": sr.ev(th, r, dy=2), "rho_t": sr.ev(th, r, dx=1), "rho_tt": sr.ev(th, r, dx=2)}

    def polar(self, x):
        """(r, theta) of Cartesian points."""
        x = np.asarray(x, dtype=float)
        if self.euclid:
            d = x - self.y
            return np.linalg.norm(d, axis=-1), np.arctan2(d @ self.e2, d @ self.e1)
        return self.chart.from_cartesian(x)

    def direction(self, th):
        th = np.asarray(th, dtype=float)
        if self.euclid:
            return np.cos(th)[..., None] * self.e1 + np.sin(th)[..., None] * self.e2
        return np.stack([s.ev(th, np.zeros_like(th), dy=1) for s in self.chart._sx], axis=-1)


def _masked(fn, metric, shape_tail):
    """Zero extension outside M of a pointwise function."""
    R = metric.radius_M

    def g(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        out = np.asarray(fn(flat), dtype=float).reshape((len(flat),) + shape_tail)
        out[np.sum(flat ** 2, axis=1) > R ** 2] = 0.0
        return out.reshape(x.shape[:-1] + shape_tail)

    return g


def _one_form_func(A, metric):
    if A is None:
        return None
    if isinstance(A, OneFormField):
        if A.func is None:
            raise ValueError("GO amplitudes need a one-form with a pointwise formula")
        return _masked(A.func, metric, (2,))
    return _masked(A, metric, (2,))


def _scalar_func(q, metric):
    if q is None:
        return None
    if isinstance(q, ScalarField):
        if q.func is None:
            raise ValueError("q needs a pointwise formula")
        return _masked(q.func, metric, ())
    return _masked(q, metric, ())


# -- phase and amplitudes -------------------------------------------------------------------

def eikonal_phase(metric, y, mesh=None, geometry=None):
    """psi(x) = d_g(x, y) as a ScalarField (with a pointwise formula) or a callable."""
    geo = geometry or PolarGeometry(metric, y)
    if np.linalg.norm(y) <= metric.radius_M:
        raise GeometryError("base point must lie outside M")

    def psi(x):
        return geo.polar(x)[0]

    if mesh is None:
        return psi
    return ScalarField(mesh, psi(mesh.points), func=psi)


class SpacetimeField:
    """Callable (t, x) -> array (len(t), npts)."""

    def __init__(self, fn, doc=""):
        self.fn = fn
        self.doc = doc

    def __call__(self, t, x):
        return self.fn(np.atleast_1d(np.asarray(t, dtype=float)), np.asarray(x, dtype=float))


def amplitude_alpha(geometry, window, Psi="one", T=None):
    """alpha = rho^(-1/4) phi_w(t - r) Psi(theta)."""
    if T is not None and T <= 2 * geometry.metric.radius_M1 + 3 * window.eps:
        raise ValueError("window support violates T > diam(M1) + 3 eps")
    Pf = fan_weight(Psi)

    def fn(t, x):
        r, th = geometry.polar(x)
        g = geometry.at(r, th)
        return g["rho"][None, :] ** -0.25 * window(t[:, None] - r[None, :]) * Pf(th)[0][None, :]

    return SpacetimeField(fn, "alpha")


class PhaseIntegral:
    """S(r, theta) = int_0^r <A(gamma), gamma'> dr' by Gauss-Legendre, and its derivatives.

    A is zero outside M, so the integral runs over the part of the ray inside
    M; splitting at the entry and exit radii keeps the quadrature exact for
    forms that do not vanish on the boundary.
    """

    def __init__(self, geometry, A, nquad=48, ntheta=801):
        self.geo = geometry
        self.A = _one_form_func(A, geometry.metric)
        self.xg, self.wg = np.polynomial.legendre.leggauss(nquad)
        if self.A is not None and not geometry.euclid:
            th = np.linspace(-0.5 * np.pi, 0.5 * np.pi, ntheta)
            a, b = self._bisect_limits(th)
            self._lim = (th, a, b)

    def _bisect_limits(self, th, nr=400, it=50):
        geo, R = self.geo, self.geo.metric.radius_M
        r = np.linspace(0, geo.chart.r[-1], nr)
        f = np.sum(geo.at(r[None, :], th[:, None])["x"] ** 2, axis=-1) - R ** 2
        inside = f < 0
        hit = inside.any(axis=1)
        i_in = np.where(hit, np.argmax(inside, axis=1), 1)
        i_out = np.where(hit, nr - 1 - np.argmax(inside[:, ::-1], axis=1), 1)

        def refine(lo, hi):
            for _ in range(it):
                mid = 0.5 * (lo + hi)
                fm = np.sum(geo.at(mid, th)["x"] ** 2, axis=-1) - R ** 2
                fl = np.sum(geo.at(lo, th)["x"] ** 2, axis=-1) - R ** 2
                same = np.sign(fm) == np.sign(fl)
                lo, hi = np.where(same, mid, lo), np.where(same, hi, mid)
            return 0.5 * (lo + hi)

        a = refine(r[i_in - 1], r[i_in])
        b = refine(r[np.minimum(i_out, nr - 2)], r[np.minimum(i_out + 1, nr - 1)])
        return np.where(hit, a, np.inf), np.where(hit, b, np.inf)

    def limits(self, th):
        """Entry and exit radii of the ray at angle theta in M (inf when it misses)."""
        th = np.asarray(th, dtype=float)
        if self.geo.euclid:
            y, R = self.geo.y, self.geo.metric.radius_M
            d = self.geo.direction(th)
            yd = d @ y
            disc = yd ** 2 - (y @ y - R ** 2)
            ok = disc > 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            return np.where(ok, -yd - sq, np.inf), np.where(ok, -yd + sq, np.inf)
        t, a, b = self._lim
        return np.interp(th, t, a), np.interp(th, t, b)

    def sigma(self, r, th):
        if self.A is None:
            return np.zeros(np.broadcast(r, th).shape)
        g = self.geo.at(r, th)
        return np.sum(self.A(g["x"]) * g["v"], axis=-1)

    def S(self, r, th):
        r = np.asarray(r, dtype=float)
        th = np.asarray(th, dtype=float)
        if self.A is None:
            return np.zeros(np.broadcast(r, th).shape)
        r, th = np.broadcast_arrays(r, th)
        a, b = self.limits(th)
        lo = np.where(np.isfinite(a), np.minimum(a, r), r)
        hi = np.where(np.isfinite(b), np.minimum(b, r), r)
        half = 0.5 * (hi - lo)
        rr = (lo + half)[..., None] + half[..., None] * self.xg
        tt = np.broadcast_to(th[..., None], rr.shape)
        # nodes sit strictly inside (entry, exit), where the mask is inactive
        return half * np.sum(self.wg * self.sigma(rr, tt), axis=-1)

    def derivatives(self, r, th, dth=1e-3, dr=1e-4):
        """S, S_r, S_rr, S_theta, S_thetatheta."""
        if self.A is None:
            z = np.zeros(np.broadcast(r, th).shape)
            return z, z, z, z, z
        S0 = self.S(r, th)
        Sp, Sm = self.S(r, th + dth), self.S(r, th - dth)
        Sp2, Sm2 = self.S(r, th + 2 * dth), self.S(r, th - 2 * dth)
        St = (-Sp2 + 8 * Sp - 8 * Sm + Sm2) / (12 * dth)
        Stt = (-Sp2 + 16 * Sp - 30 * S0 + 16 * Sm - Sm2) / (12 * dth ** 2)
        Sr = self.sigma(r, th)
        Srr = (self.sigma(r + dr, th) - self.sigma(r - dr, th)) / (2 * dr)
        return S0, Sr, Srr, St, Stt


def amplitude_beta(geometry, A, nquad=48):
    """beta_A = exp(-i S(r, theta)), time independent on the support of alpha."""
    P = PhaseIntegral(geometry, A, nquad)

    def fn(t, x):
        r, th = geometry.polar(x)
        b = np.exp(-1j * P.S(r, th))
        return np.broadcast_to(b[None, :], (len(t), len(b)))

    return SpacetimeField(fn, "beta")


# -- ansatz -----------------------------------------------------------------------------------------

@dataclass
class GOAnsatz:
    """GO probe about y: u0 = p(t - r) G(r, theta), G = rho^(-1/4) Psi beta_A."""
    metric: object
    y: np.ndarray
    h: float
    T: float
    window: Window
    Psi: object
    A: object = None
    q: object = None
    use_beta: bool = True
    geometry: PolarGeometry = None
    nquad: int = 48

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.geometry is None:
            self.geometry = PolarGeometry(self.metric, self.y)
        self._Pf = fan_weight(self.Psi)
        self._phase = PhaseIntegral(self.geometry, self.A, self.nquad)
        self._Af = self._phase.A
        self._qf = _scalar_func(self.q, self.metric)
        if self.T <= 2 * self.metric.radius_M1 + 3 * self.window.eps:
            raise ValueError("T must exceed diam(M1) + 3 eps")

    @property
    def eps(self):
        return self.window.eps

    # spatial factor -------------------------------------------------------------------------------
    def spatial(self, r, th, need_residual=True):
        """G and, optionally, E_{A,q} G and the first-order coefficient in polar form."""
        g = self.geometry.at(r, th)
        rho, rr, rrr, rt, rtt = g["rho"], g["rho_r"], g["rho_rr"], g["rho_t"], g["rho_tt"]
        Pv, P1, P2 = self._Pf(th)
        a = rho ** -0.25
        a_r = -0.25 * rho ** -1.25 * rr
        a_rr = 5 / 16 * rho ** -2.25 * rr ** 2 - 0.25 * rho ** -1.25 * rrr
        a_t = -0.25 * rho ** -1.25 * rt
        a_tt = 5 / 16 * rho ** -2.25 * rt ** 2 - 0.25 * rho ** -1.25 * rtt
        P = a * Pv
        P_r, P_rr = a_r * Pv, a_rr * Pv
        P_t = a_t * Pv + a * P1
        P_tt = a_tt * Pv + 2 * a_t * P1 + a * P2
        if self.use_beta and self._Af is not None:
            S, Sr, Srr, St, Stt = self._phase.derivatives(r, th)
        else:
            z = np.zeros_like(rho)
            S, Sr, Srr, St, Stt = z, z, z, z, z
        E = np.exp(-1j * S)
        E_r, E_t = -1j * Sr * E, -1j * St * E
        E_rr = (-1j * Srr - Sr ** 2) * E
        E_tt = (-1j * Stt - St ** 2) * E
        G = P * E
        out = {"G": G, "r": r, "theta": th, "rho": rho, "x": g["x"]}
        if not need_residual:
            return out
        G_r = P_r * E + P * E_r
        G_rr = P_rr * E + 2 * P_r * E_r + P * E_rr
        G_t = P_t * E + P * E_t
        G_tt = P_tt * E + 2 * P_t * E_t + P * E_tt
        x = g["x"]
        if self._Af is not None:
            Ax = self._Af(x)
            sig = np.sum(Ax * g["v"], axis=-1)
            A_th = np.sum(Ax * g["J"], axis=-1)
            gi = self.metric.ginv(x)
            Asq = np.einsum("...i,...ij,...j->...", Ax, gi, Ax)
            dA = self._dstar(x)
        else:
            sig = A_th = Asq = dA = np.zeros_like(rho)
        qv = self._qf(x) if self._qf is not None else np.zeros_like(rho)
        lap = G_rr + rr / (2 * rho) * G_r + G_tt / rho - rt / (2 * rho ** 2) * G_t
        EG = (-lap - 2j * (sig * G_r + A_th / rho * G_t) + 1j * dA * G + Asq * G + qv * G)
        # coefficient of p'(t - r): vanishes when G solves both transport equations
        C1 = 2 * G_r + rr / (2 * rho) * G + 2j * sig * G
        out.update({"EG": EG, "C1": C1, "sigma": sig})
        return out

    def _dstar(self, x, e=1e-4):
        """d*A = -(1/sqrt g) d_i (sqrt g g^ij A_j) by central differences."""
        m = self.metric

        def flux(z):
            return m.sqrt_det(z)[..., None] * np.einsum("...ij,...j->...i", m.ginv(z), self._Af(z))

        div = 0.0
        for k in range(2):
            dx = np.zeros(2)
            dx[k] = e
            div = div + (-flux(x + 2 * dx)[..., k] + 8 * flux(x + dx)[..., k]
                         - 8 * flux(x - dx)[..., k] + flux(x - 2 * dx)[..., k]) / (12 * e)
        return -div / m.sqrt_det(x)

    # space-time values ----------------------------------------------------------------------------
    def values(self, t, x, spatial=None):
        """u0 on the product grid (len(t), len(x))."""
        sp = spatial or self.spatial(*self.geometry.polar(x), need_residual=False)
        s = np.asarray(t)[:, None] - sp["r"][None, :]
        return self.window.profile(s, self.h, 0) * sp["G"][None, :]

    def second_time_derivative(self, t, x, spatial=None):
        sp = spatial or self.spatial(*self.geometry.polar(x), need_residual=False)
        s = np.asarray(t)[:, None] - sp["r"][None, :]
        return self.window.profile(s, self.h, 2) * sp["G"][None, :]

    def residual(self, t, x=None, spatial=None):
        """H_{A,q} u0 on the product grid."""
        sp = spatial or self.spatial(*self.geometry.polar(x))
        s = np.asarray(t)[:, None] - sp["r"][None, :]
        return (self.window.profile(s, self.h, 0) * sp["EG"][None, :]
                + self.window.profile(s, self.h, 1) * sp["C1"][None, :])

    def boundary_trace(self, mesh, t):
        """Dirichlet data and its second time derivative on the boundary of M."""
        xb = mesh.points[mesh.boundary]
        sp = self.spatial(*self.geometry.polar(xb), need_residual=False)
        return self.values(t, xb, sp), self.second_time_derivative(t, xb, sp), sp


def assemble_ansatz(metric, y, h, T, A=None, q=None, Psi="one", eps=None, use_beta=True, geometry=None):
    """GO ansatz e^{i(psi - t)/h} alpha beta_A about y."""
    eps = default_eps(T, metric) if eps is None else eps
    return GOAnsatz(metric, y, h, T, Window(eps), Psi, A, q, use_beta, geometry)


# -- checks --------------------------------------------------------------------------------------------

def _chord_grid(ans, ntheta=96, nr=48):
    """Gauss nodes on the chords of M for rays from y, with weights rho^1/2 dr dtheta."""
    geo = ans.geometry
    th = -0.5 * np.pi + (np.arange(ntheta) + 0.5) * np.pi / ntheta
    dirs = geo.direction(th)
    dirs = dirs / ans.metric.norm(np.repeat(ans.y[None], ntheta, 0), dirs)[:, None]
    t_in, t_out, _, _ = _crossings(ans.metric, np.repeat(ans.y[None], ntheta, 0), dirs, 0.01, ans.metric.radius_M)
    hit = np.isfinite(t_in)
    xg, wg = np.polynomial.legendre.leggauss(nr)
    th, t_in, t_out = th[hit], t_in[hit], t_out[hit]
    half = 0.5 * (t_out - t_in)
    R = (t_in + t_out)[:, None] / 2 + half[:, None] * xg[None, :]
    W = half[:, None] * wg[None, :] * (np.pi / ntheta)
    TH = np.broadcast_to(th[:, None], R.shape)
    return R.ravel(), TH.ravel(), W.ravel()


def residual_norm(ans, ns=None, ntheta=96, nr=48):
    """||H u0||_{L2(Q)} by quadrature in (s, theta, r) over the support of alpha in M.

    ``ns`` Gauss nodes in s; by default enough for 12 nodes per wavelength.
    """
    if ns is None:
        ns = max(24, int(np.ceil(12 * ans.eps / (2 * np.pi * ans.h))) + 8)
    R, TH, W = _chord_grid(ans, ntheta, nr)
    sp = ans.spatial(R, TH)
    W = W * np.sqrt(sp["rho"])
    xs, ws = np.polynomial.legendre.leggauss(ns)
    eps = ans.eps
    s = 1.5 * eps + 0.5 * eps * xs
    ws = 0.5 * eps * ws
    if np.max(np.diff(s)) > 2 * np.pi * ans.h / 8:
        raise ResolutionError("time quadrature resolves fewer than 8 points per wavelength")
    p0 = ans.window.profile(s, ans.h, 0)[:, None]
    p1 = ans.window.profile(s, ans.h, 1)[:, None]
    val = p0 * sp["EG"][None, :] + p1 * sp["C1"][None, :]
    return float(np.sqrt(np.sum(ws[:, None] * W[None, :] * np.abs(val) ** 2)))


def _slope(h, v):
    return float(np.polyfit(np.log(h), np.log(v), 1)[0])


def residual_scaling_check(metric, y, T, h_list=(0.2, 0.1, 0.05, 0.025), A=None, q=None, Psi="one",
                           control=True, control_h=None):
    """Residual norms of the GO ansatz over an h-list, with the beta = 1 control.

    The control breaks the first-order cancellation, leaving a term
    2 sigma G p' with |p'| ~ 1/h once 1/h dominates phi_w'/phi_w. Its slope
    is fitted on ``control_h`` (default: the h-list continued by halving
    down to eps/64) so the fit sits in that regime.
    """
    h_list = list(h_list)
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h-list must be decreasing")
    geo = PolarGeometry(metric, y)
    res = [residual_norm(assemble_ansatz(metric, y, h, T, A, q, Psi, geometry=geo)) for h in h_list]
    out = {"h": h_list, "residual_L2": res, "slope": _slope(h_list, res)}
    if control and A is not None:
        if control_h is None:
            eps = default_eps(T, metric)
            control_h = [h_list[-1]]
            while control_h[-1] / 2 >= eps / 64:
                control_h.append(control_h[-1] / 2)
        control_h = list(control_h)
        ctl = [residual_norm(assemble_ansatz(metric, y, h, T, A, q, Psi, use_beta=False, geometry=geo))
               for h in control_h]
        out.update({"control_h": control_h, "control_residual_L2": ctl,
                    "control_slope": _slope(control_h, ctl)})
    return out


def remainder_solve(op, ans, dt=None, terminal=False):
    """Solve H r = -H u0 with zero Cauchy data and zero boundary values on M.

    Returns the WaveState and a report with max_t ||r||, ||r_t||, ||grad r||
    and h^-1 max_t ||r||.
    """
    mesh = op.mesh
    dt = dt or min(0.02, ans.h / 10)
    nt = int(round(ans.T / dt))
    t = dt * np.arange(nt + 1)
    sp = ans.spatial(*ans.geometry.polar(mesh.points))
    if np.min(sp["r"]) < 0.05 * ans.metric.radius_M:
        raise GeometryError("base point too close to M")
    p0 = ans.window.profile
    F = lambda k: -(p0(t[k] - sp["r"], ans.h, 0) * sp["EG"] + p0(t[k] - sp["r"], ans.h, 1) * sp["C1"])
    nb = len(mesh.boundary)
    st = solve_wave(op, np.zeros((nt + 1, nb), dtype=complex), dt, F=F, terminal=terminal, norms=True)
    n = st.norms
    rep = {"h": ans.h, "dt": dt, "max_r_L2": float(n["u_L2"].max()), "max_rt_L2": float(n["ut_L2"].max()),
           "max_grad_r_L2": float(n["grad_L2"].max()), "scaled_remainder": float(n["u_L2"].max() / ans.h)}
    return st, rep


def report_json(rep, path=None):
    def conv(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    text = json.dumps({k: conv(v) for k, v in rep.items()}, indent=1, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
