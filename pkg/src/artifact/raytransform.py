"""Geodesic ray transforms on the inward boundary bundle of M1.

Rays start at ``y`` on the boundary of M1 with inward g-angle ``beta`` and
are integrated by composite Simpson on a uniform split of either the chord
inside M (fields zero-extended outside M) or the full path inside M1.
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .fields import OneFormField, ScalarField, helmholtz, l2_norm, sobolev_norm
from .geometry import _rk4, trace_batch


def _simpson_weights(N):
    w = np.ones(N + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return w / 3


def _crossings(metric, x0, v0, ds, R):
    """Entry and exit arclength of each geodesic through the circle of radius R.

    Rays that miss the disk get NaN. Starting points lie outside the disk.
    """
    n = len(x0)
    t_in = np.full(n, np.nan)
    t_out = np.full(n, np.nan)
    x_in = np.zeros((n, 2))
    v_in = np.zeros((n, 2))
    if metric.kind == "euclidean":
        b = np.sum(x0 * v0, axis=1)
        disc = b ** 2 - np.sum(x0 ** 2, axis=1) + R ** 2
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0))
        t_in[hit] = -b[hit] - sq[hit]
        t_out[hit] = -b[hit] + sq[hit]
        x_in[hit] = x0[hit] + t_in[hit, None] * v0[hit]
        v_in[hit] = v0[hit]
        return t_in, t_out, x_in, v_in
    R1 = metric.radius_M1
    x, v = x0.copy(), v0.copy()
    tau = np.zeros(n)
    state = np.zeros(n, dtype=int)  # 0 before M, 1 inside M, 2 done
    maxit = int(np.ceil(20 * R1 / ds))
    for _ in range(maxit):
        idx = np.flatnonzero(state < 2)
        if idx.size == 0:
            break
        xn, vn = _rk4(metric, x[idx], v[idx], ds)
        Fm = np.sum(xn ** 2, axis=1) - R ** 2
        F1 = np.sum(xn ** 2, axis=1) - R1 ** 2
        st = state[idx]
        ent = (st == 0) & (Fm < 0)
        ext = (st == 1) & (Fm > 0)
        gone = (st == 0) & (F1 > 0)
        for mask, kind in ((ent, "in"), (ext, "out")):
            if np.any(mask):
                j = idx[mask]
                s = _bisect_sign(metric, x[j], v[j], ds, R, entering=(kind == "in"))
                xs, vs = _rk4(metric, x[j], v[j], s)
                if kind == "in":
                    t_in[j] = tau[j] + s
                    x_in[j], v_in[j] = xs, vs
                else:
                    t_out[j] = tau[j] + s
        state[idx[ent]] = 1
        state[idx[ext]] = 2
        state[idx[gone]] = 2
        x[idx], v[idx] = xn, vn
        tau[idx] += ds
    return t_in, t_out, x_in, v_in


def _bisect_sign(metric, x, v, h, R, entering, maxit=80):
    lo = np.zeros(len(x))
    hi = np.full(len(x), h)
    for _ in range(maxit):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4(metric, x, v, mid)
        F = np.sum(xm ** 2, axis=1) - R ** 2
        before = F > 0 if entering else F < 0
        lo = np.where(before, mid, lo)
        hi = np.where(before, hi, mid)
        if np.all(hi - lo < 1e-15):
            break
    return 0.5 * (lo + hi)


class FanSampling:
    """Discretization of the inward bundle of the boundary of M1.

    Parameters
    ----------
    metric : MetricField
    n_y, n_theta : int
        Boundary points (uniform in angle) and inward directions (midpoint
        rule in the g-angle ``beta`` from the inward normal).
    ds : float
        Target integration step along the rays.
    """

    def __init__(self, metric, n_y=64, n_theta=64, ds=0.01):
        self.metric = metric
        self.n_y, self.n_theta, self.ds = n_y, n_theta, ds
        R1 = metric.radius_M1
        s = 2 * np.pi * np.arange(n_y) / n_y
        self.y = R1 * np.stack([np.cos(s), np.sin(s)], axis=1)
        self.beta = -0.5 * np.pi + (np.arange(n_theta) + 0.5) * np.pi / n_theta
        e1, e2 = metric.inward_frame(self.y)
        self.e1, self.e2 = e1, e2
        # boundary arclength of each sample (g-length of its arc)
        tang = R1 * np.stack([-np.sin(s), np.cos(s)], axis=1)
        darc = metric.norm(self.y, tang) * (2 * np.pi / n_y)
        self.y_arc = np.concatenate([[0.0], np.cumsum(darc)[:-1]])
        Y = np.repeat(self.y, n_theta, 0)
        B = np.tile(self.beta, n_y)
        self.x0 = Y
        self.v0 = np.cos(B)[:, None] * np.repeat(e1, n_theta, 0) + np.sin(B)[:, None] * np.repeat(e2, n_theta, 0)
        self.mu = np.cos(B)
        self.weight = np.repeat(darc, n_theta) * (np.pi / n_theta)
        self._paths = {}

    @property
    def shape(self):
        return (self.n_y, self.n_theta)

    @property
    def n_rays(self):
        return self.n_y * self.n_theta

    def paths(self, support="M"):
        """Simpson nodes: positions (n_rays, N+1, 2), velocities, weights (n_rays, N+1)."""
        if support in self._paths:
            return self._paths[support]
        m = self.metric
        if support == "M":
            t_in, t_out, x_in, v_in = _crossings(m, self.x0, self.v0, self.ds, m.radius_M)
        elif support == "M1":
            t_out = trace_batch(m, self.x0, self.v0, ds=self.ds)["exit_time"]
            t_in = np.zeros(self.n_rays)
            x_in, v_in = self.x0.copy(), self.v0.copy()
        else:
            raise ValueError("support must be 'M' or 'M1'")
        hit = np.isfinite(t_in) & np.isfinite(t_out)
        L = np.where(hit, t_out - t_in, 0.0)
        N = max(2, 2 * int(np.ceil(L.max() / (2 * self.ds))))
        h = L / N
        X = np.zeros((self.n_rays, N + 1, 2))
        V = np.zeros((self.n_rays, N + 1, 2))
        x, v = x_in.copy(), v_in.copy()
        X[:, 0], V[:, 0] = x, v
        for k in range(1, N + 1):
            x, v = _rk4(m, x, v, h)
            X[:, k], V[:, k] = x, v
        W = h[:, None] * _simpson_weights(N)[None, :]
        W[~hit] = 0.0
        out = {"x": X, "v": V, "w": W, "hit": hit, "t_in": t_in, "t_out": t_out, "length": L}
        self._paths[support] = out
        return out

    def matrix0(self, mesh, support="M"):
        key = ("I0", id(mesh), support)
        if key not in self._paths:
            P = self.paths(support)
            self._paths[key] = _ray_matrix(mesh, P, None)
        return self._paths[key]

    def matrix1(self, mesh, support="M"):
        key = ("I1", id(mesh), support)
        if key not in self._paths:
            P = self.paths(support)
            self._paths[key] = sps.hstack([_ray_matrix(mesh, P, 0), _ray_matrix(mesh, P, 1)]).tocsr()
        return self._paths[key]

    def grid(self, values):
        return np.asarray(values).reshape(self.n_y, self.n_theta)


def _ray_matrix(mesh, P, comp):
    X, W = P["x"], P["w"]
    nr, nk = W.shape
    pts = X.reshape(-1, 2)
    s, verts, bary = mesh.locate(pts)
    wt = W.reshape(-1)
    if comp is not None:
        wt = wt * P["v"].reshape(-1, 2)[:, comp]
    data = (bary * wt[:, None]).ravel()
    rows = np.repeat(np.repeat(np.arange(nr), nk), 3)
    keep = data != 0
    return sps.csr_matrix((data[keep], (rows[keep], verts.ravel()[keep])), shape=(nr, mesh.n))


@dataclass
class RayData:
    fan: FanSampling
    values: np.ndarray
    tag: str

    def grid(self):
        return self.fan.grid(self.values)

    def to_csv(self, path):
        f = self.fan
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["y_index", "theta_index", "y_arc", "theta_angle", "mu", "value_re", "value_im"])
            k = 0
            for i in range(f.n_y):
                for j in range(f.n_theta):
                    v = self.values[k]
                    wr.writerow([i, j, f"{f.y_arc[i]:.12e}", f"{f.beta[j]:.12e}", f"{f.mu[k]:.12e}",
                                 f"{np.real(v):.12e}", f"{np.imag(v):.12e}"])
                    k += 1


def _sample(fn, X):
    return fn(X.reshape(-1, 2)).reshape(X.shape[:-1] + np.shape(fn(X[:1, :1].reshape(-1, 2)))[1:])


def I0(f, fan, support="M"):
    """Ray transform of a function: exact sampling if a function is available."""
    if callable(f) and not isinstance(f, ScalarField):
        fn = f
    elif isinstance(f, ScalarField) and f.func is not None:
        fn = f.func
    else:
        return RayData(fan, fan.matrix0(f.mesh, support) @ f.values, "I0")
    P = fan.paths(support)
    vals = _sample(fn, P["x"])
    return RayData(fan, np.sum(P["w"] * vals, axis=1), "I0")


def I1(A, fan, support="M"):
    """Ray transform of a one-form, integral of A(gamma-dot) along each ray."""
    if callable(A) and not isinstance(A, OneFormField):
        fn = A
    elif isinstance(A, OneFormField) and A.func is not None:
        fn = A.func
    else:
        vals = A.values
        return RayData(fan, fan.matrix1(A.mesh, support) @ np.concatenate([vals[:, 0], vals[:, 1]]), "I1")
    P = fan.paths(support)
    a = _sample(fn, P["x"])
    return RayData(fan, np.sum(P["w"] * np.sum(a * P["v"], axis=-1), axis=1), "I1")


def adjoint0(r, fan, mesh):
    """L^2_mu adjoint of the discrete I0 into nodal functions."""
    val = r.values if isinstance(r, RayData) else np.asarray(r)
    fem = mesh.fem(fan.metric)
    z = fan.matrix0(mesh).T @ (fan.weight * fan.mu * val)
    return ScalarField(mesh, z / fem.mass)


def adjoint1(r, fan, mesh):
    """L^2_mu adjoint of the discrete I1 into nodal one-forms (metric inner product)."""
    val = r.values if isinstance(r, RayData) else np.asarray(r)
    fem = mesh.fem(fan.metric)
    z = fan.matrix1(mesh).T @ (fan.weight * fan.mu * val)
    z = np.stack([z[:mesh.n], z[mesh.n:]], axis=1)
    a = np.einsum("nij,nj->ni", fan.metric.g(mesh.points), z) / fem.mass[:, None]
    return OneFormField(mesh, a)


def normal0(f, fan):
    return adjoint0(I0(ScalarField(f.mesh, f.values), fan), fan, f.mesh)


def normal1(A, fan):
    return adjoint1(I1(OneFormField(A.mesh, A.values), fan), fan, A.mesh)


def pair_mu(r1, r2, fan):
    return np.sum(fan.weight * fan.mu * r1 * np.conj(r2))


class SolverError(RuntimeError):
    pass


def _cg(Aop, b, M, rtol, maxiter):
    it = [0]

    def cb(_):
        it[0] += 1

    x, info = spla.cg(Aop, b, rtol=rtol, atol=0.0, M=M, maxiter=maxiter, callback=cb)
    res = np.linalg.norm(Aop @ x - b) / max(np.linalg.norm(b), 1e-300)
    if info != 0 and res > 10 * rtol:
        raise SolverError(f"CG did not converge: relative residual {res:.2e} after {it[0]} iterations")
    return x, {"iterations": it[0], "relative_residual": float(res)}


def invert_normal0(rhs, fan, eps=1e-6, rtol=1e-8, maxiter=4000):
    """argmin ||N0 u - rhs||^2_{L^2} + eps ||u||^2_{H^1}, by CG on the normal equations."""
    mesh = rhs.mesh
    fem = mesh.fem(fan.metric)
    I = fan.matrix0(mesh)
    W = fan.weight * fan.mu
    m = fem.mass
    H1 = sps.diags(m) + fem.K

    def S(u):
        return I.T @ (W * (I @ u))

    b = S(rhs.values.real) if not np.iscomplexobj(rhs.values) else S(rhs.values)
    if np.linalg.norm(b) == 0:
        return ScalarField(mesh, np.zeros(mesh.n)), {"iterations": 0, "relative_residual": 0.0}
    Aop = spla.LinearOperator((mesh.n, mesh.n), matvec=lambda u: S(S(u) / m) + eps * (H1 @ u), dtype=b.dtype)
    dS = np.asarray(I.multiply(I).T @ W).ravel()
    pre = sps.diags(1.0 / (dS ** 2 / m + eps * H1.diagonal()))
    u, info = _cg(Aop, b, pre, rtol, maxiter)
    return ScalarField(mesh, u), info


def invert_normal1(rhs, fan, eps=1e-6, rtol=1e-8, maxiter=4000):
    """Regularized inversion of N1; the result is reported through its solenoidal part."""
    mesh = rhs.mesh
    metric = fan.metric
    fem = mesh.fem(metric)
    I = fan.matrix1(mesh)
    W = fan.weight * fan.mu
    n = mesh.n
    G = metric.g(mesh.points)
    Gi = np.linalg.inv(G)
    m = fem.mass
    H1 = sps.diags(m) + fem.K

    def to2(u):
        return np.stack([u[:n], u[n:]], axis=1)

    def to1(a):
        return np.concatenate([a[:, 0], a[:, 1]])

    # work in the metric-weighted inner product: <a,b> = sum m a^T G^-1 b
    def N(u):
        z = to2(I.T @ (W * (I @ u)))
        return to1(np.einsum("nij,nj->ni", G, z) / m[:, None])

    def Hmul(u):
        a = to2(u)
        return to1(np.stack([H1 @ a[:, 0], H1 @ a[:, 1]], axis=1))

    r = to1(rhs.values)

    # normal equations: N^* M N u + eps H u = N^* M r, and N^* M = S is symmetric
    def S(u):
        return I.T @ (W * (I @ u))

    b = S(r)
    if np.linalg.norm(b) == 0:
        return helmholtz(OneFormField(mesh, np.zeros((n, 2))), metric).solenoidal, {"iterations": 0}
    Aop = spla.LinearOperator((2 * n, 2 * n), matvec=lambda u: S(N(u)) + eps * Hmul(u), dtype=b.dtype)
    dS = np.asarray(I.multiply(I).T @ W).ravel()
    gd = np.concatenate([G[:, 0, 0], G[:, 1, 1]])
    mm = np.concatenate([m, m])
    pre = sps.diags(1.0 / (dS ** 2 * gd / mm + eps * np.concatenate([H1.diagonal()] * 2)))
    u, info = _cg(Aop, b, pre, rtol, maxiter)
    A = OneFormField(mesh, to2(u))
    split = helmholtz(A, metric)
    info["raw"] = A
    return split.solenoidal, info


def stability_bracket(fields, fan):
    """Empirical bracket of ||N f||_{H^1} / ||f||_{L^2} over a family of fields.

    One-forms are measured against their solenoidal part. Returns the
    ratios with c1 = min, c2 = max and their quotient.
    """
    ratios = []
    for f in fields:
        if isinstance(f, OneFormField):
            ref = l2_norm(helmholtz(f, fan.metric).solenoidal, fan.metric)
            Nf = normal1(f, fan)
        else:
            ref = l2_norm(f, fan.metric)
            Nf = normal0(f, fan)
        ratios.append(sobolev_norm(Nf, 1, fan.metric) / ref)
    ratios = np.array(ratios)
    return {"ratios": ratios, "c1": float(ratios.min()), "c2": float(ratios.max()),
            "bracket": float(ratios.max() / ratios.min())}
