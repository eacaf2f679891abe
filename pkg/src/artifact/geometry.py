"""Simple Riemannian disks: metrics, geodesics, distances and polar charts.

All geometry lives in the Cartesian chart of the plane. The inner manifold
M is the disk of radius ``radius_M`` and the simple extension M1 is the
concentric disk of radius ``radius_M1``.
"""

from dataclasses import dataclass

import numpy as np
import sympy as sp
from scipy.interpolate import CubicHermiteSpline, RectBivariateSpline


class GeometryError(RuntimeError):
    pass


class TrappingError(GeometryError):
    pass


class ConjugatePointError(GeometryError):
    pass


X1, X2 = sp.symbols("x1 x2", real=True)


def as_expr(expr):
    """Sympify ``expr`` and rebind any free ``x1``/``x2`` to the module symbols."""
    e = sp.sympify(expr, locals={"x1": X1, "x2": X2})
    return e.subs({s: {"x1": X1, "x2": X2}[s.name] for s in e.free_symbols if s.name in ("x1", "x2")})


def _lambdify(expr):
    f = sp.lambdify((X1, X2), expr, "numpy")

    def call(x):
        x = np.asarray(x, dtype=float)
        out = f(x[..., 0], x[..., 1])
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    return call


class MetricField:
    """Smooth SPD metric on a disk.

    Parameters
    ----------
    kind : {'euclidean', 'conformal', 'general'}
    lam : str or sympy expression, optional
        Conformal exponent, g = exp(2 lam) I. Required for ``kind='conformal'``.
    components : callable, optional
        ``x -> g(x)`` with shape (..., 2, 2), for ``kind='general'``.
        Derivatives are taken by 4th-order central differences.
    radius_M, radius_M1 : float
        Radii of M and of the simple extension M1 (default 1.2 radius_M).
    """

    def __init__(self, kind="euclidean", lam=None, components=None,
                 radius_M=1.0, radius_M1=None, fd_step=1e-3):
        if kind not in ("euclidean", "conformal", "general"):
            raise ValueError(f"unknown metric kind {kind!r}")
        self.kind = kind
        self.radius_M = float(radius_M)
        self.radius_M1 = float(1.2 * radius_M if radius_M1 is None else radius_M1)
        if self.radius_M1 < self.radius_M:
            raise ValueError("radius_M1 must be >= radius_M")
        self.fd_step = fd_step
        self.lam_expr = None
        if kind == "conformal":
            if lam is None:
                raise ValueError("conformal metric needs lam")
            expr = as_expr(lam)
            self.lam_expr = expr
            self._lam = _lambdify(expr)
            grad = [sp.diff(expr, s) for s in (X1, X2)]
            self._dlam = [_lambdify(e) for e in grad]
            self._d2lam = [[_lambdify(sp.diff(e, s)) for s in (X1, X2)] for e in grad]
        elif kind == "general":
            if components is None:
                raise ValueError("general metric needs components")
            self._components = components

    def __repr__(self):
        extra = f", lam={self.lam_expr}" if self.lam_expr is not None else ""
        return (f"MetricField(kind={self.kind!r}{extra}, radius_M={self.radius_M}, "
                f"radius_M1={self.radius_M1})")

    # -- pointwise tensors ------------------------------------------------
    def lam(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "conformal":
            return self._lam(x)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1])
        return 0.25 * np.log(np.linalg.det(self.g(x)))

    def g(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        if self.kind == "conformal":
            return np.exp(2 * self._lam(x))[..., None, None] * np.eye(2)
        return np.asarray(self._components(x), dtype=float)

    def ginv(self, x):
        return np.linalg.inv(self.g(x))

    def sqrt_det(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.ones(x.shape[:-1])
        if self.kind == "conformal":
            return np.exp(2 * self._lam(x))
        return np.sqrt(np.linalg.det(self.g(x)))

    def _fd(self, fun, x):
        # 4th-order central differences, derivative index placed first
        x = np.asarray(x, dtype=float)
        e = self.fd_step
        out = []
        for k in range(2):
            dx = np.zeros(2)
            dx[k] = e
            out.append((-fun(x + 2 * dx) + 8 * fun(x + dx) - 8 * fun(x - dx)
                        + fun(x - 2 * dx)) / (12 * e))
        return np.stack(out, axis=x.ndim - 1)

    def dg(self, x):
        """Metric derivatives, ``dg[..., k, i, j] = d_k g_ij``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1] + (2, 2, 2))
        if self.kind == "conformal":
            e2 = np.exp(2 * self._lam(x))
            dl = np.stack([f(x) for f in self._dlam], axis=-1)
            return 2 * (e2[..., None] * dl)[..., :, None, None] * np.eye(2)
        return self._fd(self.g, x)

    def d2g(self, x):
        """Second derivatives, ``d2g[..., l, k, i, j] = d_l d_k g_ij``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        if self.kind == "conformal":
            e2 = np.exp(2 * self._lam(x))
            dl = np.stack([f(x) for f in self._dlam], axis=-1)
            hl = np.stack([np.stack([f(x) for f in row], axis=-1) for row in self._d2lam], axis=-2)
            s = (4 * dl[..., :, None] * dl[..., None, :] + 2 * hl) * e2[..., None, None]
            return s[..., :, :, None, None] * np.eye(2)
        return self._fd(self.dg, x)

    def christoffel(self, x):
        """Levi-Civita symbols ``G[..., k, i, j] = Gamma^k_ij``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1] + (2, 2, 2))
        if self.kind == "conformal":
            dl = np.stack([f(x) for f in self._dlam], axis=-1)
            eye = np.eye(2)
            return (np.einsum("ki,...j->...kij", eye, dl) + np.einsum("kj,...i->...kij", eye, dl)
                    - np.einsum("ij,...k->...kij", eye, dl))
        dg = self.dg(x)
        low = 0.5 * (np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg) - dg)
        return np.einsum("...kl,...lij->...kij", self.ginv(x), low)

    def dchristoffel(self, x):
        """``dG[..., m, k, i, j] = d_m Gamma^k_ij``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "euclidean":
            return np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        if self.kind == "conformal":
            hl = np.stack([np.stack([f(x) for f in row], axis=-1) for row in self._d2lam], axis=-2)
            eye = np.eye(2)
            return (np.einsum("ki,...mj->...mkij", eye, hl) + np.einsum("kj,...mi->...mkij", eye, hl)
                    - np.einsum("ij,...mk->...mkij", eye, hl))
        gi = self.ginv(x)
        dg = self.dg(x)
        d2 = self.d2g(x)
        low = 0.5 * (np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg) - dg)
        dlow = 0.5 * (np.einsum("...milj->...mlij", d2) + np.einsum("...mjli->...mlij", d2) - d2)
        dgi = -np.einsum("...ka,...mab,...bl->...mkl", gi, dg, gi)
        return np.einsum("...mkl,...lij->...mkij", dgi, low) + np.einsum("...kl,...mlij->...mkij", gi, dlow)

    def inner(self, x, u, v):
        return np.einsum("...i,...ij,...j->...", u, self.g(x), v)

    def norm(self, x, v):
        return np.sqrt(self.inner(x, v, v))

    def unit(self, x, v):
        return v / self.norm(x, v)[..., None]

    def inward_frame(self, y):
        """g-orthonormal frame (e1, e2) at boundary points, e1 the inward normal."""
        y = np.asarray(y, dtype=float)
        gi = self.ginv(y)
        grad = np.einsum("...ij,...j->...i", gi, y)  # sharp of d(|x|^2/2)
        e1 = -self.unit(y, grad)
        rot = np.stack([-e1[..., 1], e1[..., 0]], axis=-1)
        e2 = rot - self.inner(y, rot, e1)[..., None] * e1
        return e1, self.unit(y, e2)

    def check_spd(self, x):
        ev = np.linalg.eigvalsh(self.g(x))
        return float(ev.min())


def christoffel(metric, x):
    """Christoffel symbols at a point inside M1, shape (2, 2, 2)."""
    x = np.asarray(x, dtype=float)
    if np.sum(x ** 2, axis=-1).max() > metric.radius_M1 ** 2 * (1 + 1e-12):
        raise GeometryError("point outside M1")
    return metric.christoffel(x)


# -- geodesic flow ------------------------------------------------------------

def _accel(metric, x, v):
    return -np.einsum("...kij,...i,...j->...k", metric.christoffel(x), v, v)


def _rk4(metric, x, v, h):
    h = np.asarray(h, dtype=float)[..., None] if np.ndim(h) else h
    k1x, k1v = v, _accel(metric, x, v)
    k2x, k2v = v + 0.5 * h * k1v, _accel(metric, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = v + 0.5 * h * k2v, _accel(metric, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = v + h * k3v, _accel(metric, x + h * k3x, v + h * k3v)
    return (x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x),
            v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))


def _jacobi_rhs(metric, s):
    x, v, J, dJ = s[..., 0:2], s[..., 2:4], s[..., 4:6], s[..., 6:8]
    G = metric.christoffel(x)
    dG = metric.dchristoffel(x)
    a = -np.einsum("...kij,...i,...j->...k", G, v, v)
    aJ = (-np.einsum("...mkij,...i,...j,...m->...k", dG, v, v, J)
          - 2 * np.einsum("...kij,...i,...j->...k", G, v, dJ))
    return np.concatenate([v, a, dJ, aJ], axis=-1)


def _rk4_jacobi(metric, s, h):
    h = np.asarray(h, dtype=float)[..., None] if np.ndim(h) else h
    k1 = _jacobi_rhs(metric, s)
    k2 = _jacobi_rhs(metric, s + 0.5 * h * k1)
    k3 = _jacobi_rhs(metric, s + 0.5 * h * k2)
    k4 = _jacobi_rhs(metric, s + h * k3)
    return s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _bisect_crossing(metric, x, v, h_hi, radius, tol=1e-10, maxit=80):
    """Step fraction in (0, h_hi] at which |x|^2 = radius^2, batched.

    Assumes the level function is negative at 0 and positive at ``h_hi``.
    """
    lo = np.zeros(len(x))
    hi = np.array(h_hi, dtype=float) * np.ones(len(x))
    for _ in range(maxit):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4(metric, x, v, mid)
        F = np.sum(xm ** 2, axis=-1) - radius ** 2
        inside = F < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
        if np.all(hi - lo < 1e-15 * np.maximum(hi, 1.0)):
            break
    s = 0.5 * (lo + hi)
    xs, vs = _rk4(metric, x, v, s)
    if np.any(np.abs(np.sum(xs ** 2, axis=-1) - radius ** 2) > tol * max(1.0, radius ** 2) * 10):
        raise GeometryError("boundary crossing not resolved")
    return s, xs, vs


def trace_batch(metric, x0, v0, ds=0.01, radius=None, max_steps=None, record=False):
    """Trace unit-speed geodesics until they leave the disk of ``radius``.

    The start points may lie on that circle; a crossing is registered once the
    level function turns positive after the first step.

    Returns
    -------
    dict with ``exit_time`` (n,), ``exit_x``, ``exit_v`` and, if ``record``,
    lists of per-ray node arrays ``taus``, ``xs``, ``vs``.
    """
    R = metric.radius_M1 if radius is None else radius
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    n = len(x0)
    if max_steps is None:
        max_steps = int(np.ceil(20 * R / ds)) + 10
    x, v = x0.copy(), v0.copy()
    tau = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    exit_time = np.full(n, np.nan)
    exit_x = np.zeros((n, 2))
    exit_v = np.zeros((n, 2))
    hist = [(tau.copy(), x.copy(), v.copy())] if record else None
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xn, vn = _rk4(metric, x[idx], v[idx], ds)
        F = np.sum(xn ** 2, axis=-1) - R ** 2
        out = F > 0
        if np.any(out):
            j = idx[out]
            s, xs, vs = _bisect_crossing(metric, x[j], v[j], ds, R)
            exit_time[j] = tau[j] + s
            exit_x[j], exit_v[j] = xs, vs
            alive[j] = False
        k = idx[~out]
        x[k], v[k] = xn[~out], vn[~out]
        tau[k] += ds
        if record:
            hist.append((tau.copy(), x.copy(), v.copy()))
    if np.any(alive):
        raise TrappingError(f"{alive.sum()} geodesics did not exit within the step budget")
    res = {"exit_time": exit_time, "exit_x": exit_x, "exit_v": exit_v}
    if record:
        T = np.array([h[0] for h in hist])
        Xs = np.array([h[1] for h in hist])
        Vs = np.array([h[2] for h in hist])
        taus, xs, vs = [], [], []
        for i in range(n):
            m = T[:, i] < exit_time[i] - 1e-14
            # keep only nodes strictly before the exit (tau frozen after exit)
            keep = np.concatenate([[True], np.diff(T[:, i]) > 0]) & m
            taus.append(np.concatenate([T[keep, i], [exit_time[i]]]))
            xs.append(np.vstack([Xs[keep, i], exit_x[i]]))
            vs.append(np.vstack([Vs[keep, i], exit_v[i]]))
        res.update(taus=taus, xs=xs, vs=vs)
    return res


@dataclass
class GeodesicPath:
    start: np.ndarray
    direction: np.ndarray
    taus: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    exit_time: float

    def __post_init__(self):
        self._spline = CubicHermiteSpline(self.taus, self.positions, self.velocities, axis=0)

    def __call__(self, tau):
        """Position at arclength ``tau`` by Hermite interpolation."""
        return self._spline(tau)


def trace_geodesic(metric, x, xi, ds=0.01):
    """Maximal unit-speed geodesic from ``x`` with initial velocity ``xi``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if abs(metric.norm(x, xi) - 1) > 1e-10:
        raise ValueError("initial direction is not g-unit")
    if x @ x > metric.radius_M1 ** 2 * (1 + 1e-12):
        raise GeometryError("start point outside M1")
    res = trace_batch(metric, x[None], xi[None], ds=ds, record=True)
    return GeodesicPath(x, xi, res["taus"][0], res["xs"][0], res["vs"][0], float(res["exit_time"][0]))


def _shoot(metric, y, alpha, tau, nsteps):
    """Endpoint, velocity and Jacobi field of the geodesic from y at g-angle alpha."""
    e1, e2 = metric.inward_frame(y) if abs(np.linalg.norm(y) - metric.radius_M1) < 1e-9 else _frame(metric, y)
    v0 = np.cos(alpha) * e1 + np.sin(alpha) * e2
    dv0 = -np.sin(alpha) * e1 + np.cos(alpha) * e2
    s = np.concatenate([y, v0, np.zeros(2), dv0])
    h = tau / nsteps
    for _ in range(nsteps):
        s = _rk4_jacobi(metric, s, h)
    return s[0:2], s[2:4], s[4:6]


def _frame(metric, y):
    e1 = metric.unit(y, np.array([1.0, 0.0]))
    rot = np.array([-e1[1], e1[0]])
    e2 = rot - metric.inner(y, rot, e1) * e1
    return e1, metric.unit(y, e2)


def distance(metric, x, y, ds=0.01, tol=1e-12, maxit=30):
    """Riemannian distance d_g(x, y) by two-point shooting from ``y``.

    Newton iteration on (initial angle, length) seeded from the Euclidean chord.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x - y
    if np.linalg.norm(d) < 1e-14:
        return 0.0
    if metric.kind == "euclidean":
        return float(np.linalg.norm(d))
    e1, e2 = metric.inward_frame(y) if abs(np.linalg.norm(y) - metric.radius_M1) < 1e-9 else _frame(metric, y)
    G = metric.g(y)
    alpha = np.arctan2(e2 @ G @ d, e1 @ G @ d)
    mid = 0.5 * (x + y)
    tau = float(np.sqrt(metric.inner(mid, d, d)))
    nsteps = max(50, int(np.ceil(2 * tau / ds)))
    for _ in range(maxit):
        xe, ve, Je = _shoot(metric, y, alpha, tau, nsteps)
        r = xe - x
        if np.linalg.norm(r) < tol:
            return tau
        Jac = np.column_stack([Je, ve])
        da, dt = np.linalg.solve(Jac, -r)
        step = 1.0
        while step > 1e-4:
            a2, t2 = alpha + step * da, tau + step * dt
            if t2 > 0 and np.linalg.norm(_shoot(metric, y, a2, t2, nsteps)[0] - x) < np.linalg.norm(r):
                break
            step *= 0.5
        alpha, tau = alpha + step * da, tau + step * dt
    xe, _, _ = _shoot(metric, y, alpha, tau, nsteps)
    if np.linalg.norm(xe - x) > 1e-8:
        raise GeometryError("shooting did not converge")
    return tau


# -- polar charts ---------------------------------------------------------------

@dataclass
class PolarChart:
    """Geodesic polar coordinates (r, theta) about a boundary point ``y``.

    ``theta`` is the g-angle from the inward normal at ``y``. Grids are
    ``r`` (nr,) and ``theta`` (nt,); ``x``, ``v`` and ``J`` have shape
    (nt, nr, 2); ``rho`` = |J|_g^2 = det g_0 has shape (nt, nr); ``exit`` (nt,)
    holds the M1 exit time along each ray.
    """
    metric: MetricField
    y: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    v: np.ndarray
    J: np.ndarray
    rho: np.ndarray
    exit: np.ndarray
    jacobi_det: np.ndarray

    def __post_init__(self):
        self._sx = [RectBivariateSpline(self.theta, self.r, self.x[..., k], kx=5, ky=5) for k in range(2)]
        self._euclid = self.metric.kind == "euclidean"
        self._e1, self._e2 = self.metric.inward_frame(self.y)

    def to_cartesian(self, r, theta):
        if self._euclid:
            d = np.cos(theta)[..., None] * self._e1 + np.sin(theta)[..., None] * self._e2
            return self.y + np.asarray(r)[..., None] * d
        return np.stack([s.ev(theta, r) for s in self._sx], axis=-1)

    def from_cartesian(self, x, tol=1e-11, maxit=30):
        """Inverse chart (r, theta) for points reachable from ``y``."""
        x = np.asarray(x, dtype=float)
        d = x - self.y
        if self._euclid:
            r = np.linalg.norm(d, axis=-1)
            th = np.arctan2(d @ self._e2, d @ self._e1)
            return r, th
        flat = x.reshape(-1, 2)
        G = self.metric.g(self.y)
        dflat = flat - self.y
        th = np.arctan2(dflat @ G @ self._e2, dflat @ G @ self._e1)
        # seed radius from the grid: nearest node along the seeded ray
        r = np.sqrt(np.einsum("ni,ij,nj->n", dflat, G, dflat))
        for _ in range(maxit):
            X = np.stack([s.ev(th, r) for s in self._sx], axis=-1)
            Xr = np.stack([s.ev(th, r, dy=1) for s in self._sx], axis=-1)
            Xt = np.stack([s.ev(th, r, dx=1) for s in self._sx], axis=-1)
            res = X - flat
            det = Xr[:, 0] * Xt[:, 1] - Xr[:, 1] * Xt[:, 0]
            dr = -(Xt[:, 1] * res[:, 0] - Xt[:, 0] * res[:, 1]) / det
            dt = -(-Xr[:, 1] * res[:, 0] + Xr[:, 0] * res[:, 1]) / det
            r, th = r + dr, th + dt
            if np.max(np.abs(res)) < tol:
                break
        return r.reshape(x.shape[:-1]), th.reshape(x.shape[:-1])

    def rho_at(self, r, theta):
        if self._euclid:
            return np.asarray(r, dtype=float) ** 2
        return self._rho_spline().ev(theta, r)

    def _rho_spline(self):
        if not hasattr(self, "_srho"):
            self._srho = RectBivariateSpline(self.theta, self.r, self.rho, kx=5, ky=5)
        return self._srho


def polar_chart(metric, y, nr=None, ntheta=181, dr=0.005, theta_max=None):
    """Geodesic polar chart about ``y`` on the circle of radius ``radius_M1``.

    Rays are integrated together with their Jacobi fields on a common radial
    grid up to the longest exit time; rays continue past their own exit so the
    grid is rectangular (``exit`` marks where each one leaves M1).
    """
    y = np.asarray(y, dtype=float)
    if abs(np.linalg.norm(y) - metric.radius_M1) > 1e-9:
        raise GeometryError("base point must lie on the boundary of M1")
    if theta_max is None:
        theta_max = 0.5 * np.pi - 1e-3
    theta = np.linspace(-theta_max, theta_max, ntheta)
    e1, e2 = metric.inward_frame(y)
    v0 = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    dv0 = -np.sin(theta)[:, None] * e1 + np.cos(theta)[:, None] * e2
    exit_t = trace_batch(metric, np.repeat(y[None], ntheta, 0), v0, ds=0.01)["exit_time"]
    rmax = float(exit_t.max())
    if nr is None:
        nr = int(np.ceil(rmax / dr)) + 1
    r = np.linspace(0.0, rmax, nr)
    h = r[1] - r[0]
    s = np.concatenate([np.repeat(y[None], ntheta, 0), v0, np.zeros((ntheta, 2)), dv0], axis=1)
    S = np.empty((ntheta, nr, 8))
    S[:, 0] = s
    for k in range(1, nr):
        s = _rk4_jacobi(metric, s, h)
        S[:, k] = s
    x, v, J = S[..., 0:2], S[..., 2:4], S[..., 4:6]
    rho = metric.inner(x, J, J)
    small = r < 1e-3
    rho[:, small] = r[small] ** 2
    sq = np.sqrt(metric.sqrt_det(x) ** 2)
    jdet = sq * (v[..., 0] * J[..., 1] - v[..., 1] * J[..., 0])
    inside = r[None, :] <= exit_t[:, None]
    if np.any((jdet[:, 1:] <= 0) & inside[:, 1:]):
        raise ConjugatePointError("Jacobi determinant vanished inside M1")
    return PolarChart(metric, y, r, theta, x, v, J, rho, exit_t, jdet)


def check_simplicity(metric, n_y=24, n_theta=24, ds=0.01):
    """Scan boundary convexity, conjugate points and trapping on a fan.

    Returns
    -------
    dict with ``convexity_margin`` (min normal curvature of the boundary of
    M1), ``min_jacobi_det`` (min over rays of D(r)/r, with D the signed
    Jacobi determinant), ``max_exit_time``, ``trapped``, ``conjugate_point``
    and ``passed``.
    """
    R = metric.radius_M1
    s = 2 * np.pi * np.arange(n_y) / n_y
    y = R * np.stack([np.cos(s), np.sin(s)], axis=-1)
    # second fundamental form of {|x|^2 = R^2} along the g-unit tangent
    _, T = metric.inward_frame(y)
    G = metric.christoffel(y)
    grad = 2 * y
    hessT = 2 * np.sum(T * T, axis=-1) - np.einsum("nkij,ni,nj,nk->n", G, T, T, grad)
    gradnorm = metric.norm(y, np.einsum("nij,nj->ni", metric.ginv(y), grad))
    convexity = float(np.min(hessT / gradnorm))

    # odd interior grid so the inward normal (beta = 0) is always scanned
    nb = n_theta + 1 - n_theta % 2
    beta = np.linspace(-0.5 * np.pi, 0.5 * np.pi, nb + 2)[1:-1]
    n_theta = nb
    e1, e2 = metric.inward_frame(y)
    Y = np.repeat(y, n_theta, 0)
    E1, E2 = np.repeat(e1, n_theta, 0), np.repeat(e2, n_theta, 0)
    B = np.tile(beta, n_y)
    v0 = np.cos(B)[:, None] * E1 + np.sin(B)[:, None] * E2
    dv0 = -np.sin(B)[:, None] * E1 + np.cos(B)[:, None] * E2
    trapped = False
    try:
        exit_t = trace_batch(metric, Y, v0, ds=ds)["exit_time"]
    except TrappingError:
        trapped = True
        exit_t = np.full(len(Y), np.inf)
    tmax = np.where(np.isfinite(exit_t), exit_t, 20 * R)
    nsteps = int(np.ceil(tmax.max() / ds))
    st = np.concatenate([Y, v0, np.zeros_like(Y), dv0], axis=1)
    min_ratio = np.inf
    tau = 0.0
    for _ in range(nsteps):
        st = _rk4_jacobi(metric, st, ds)
        tau += ds
        live = tau <= tmax
        if not np.any(live):
            break
        x, v, J = st[live, 0:2], st[live, 2:4], st[live, 4:6]
        D = metric.sqrt_det(x) * (v[:, 0] * J[:, 1] - v[:, 1] * J[:, 0])
        min_ratio = min(min_ratio, float(np.min(D / tau)))
    conj = min_ratio <= 0
    return {
        "convexity_margin": convexity,
        "min_jacobi_det": min_ratio,
        "max_exit_time": float(np.max(exit_t)),
        "trapped": trapped,
        "conjugate_point": bool(conj),
        "passed": bool(convexity > 0 and not conj and not trapped),
    }
