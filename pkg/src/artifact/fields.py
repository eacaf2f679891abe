"""Scalar fields and one-forms on a disk mesh.

One-forms carry nodal Cartesian components ``values`` (n, 2) and, for the
discrete calculus, an edge cochain: the line integral of the form along each
mesh edge. The cochain is taken from an exact source when one is known (an
analytic ``func`` integrated by Gauss-Legendre, or the exact differences of a
discrete gradient), otherwise from the trapezoid rule on nodal values.

With edge weights w_e = -K_ij (K the P1 stiffness matrix) the inner product of
one-forms is ``sum_e w_e a_e conj(b_e)`` and

    d*  = M^-1 D^T W,          d*d = M^-1 K = -Delta_g,

with M the lumped mass. The magnetic differential uses edge parallel
transport exp(i theta_e / 2), so gauge covariance holds exactly on the mesh.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
import sympy as sp

from .geometry import X1, X2, as_expr

_GL_X, _GL_W = np.polynomial.legendre.leggauss(6)


def _as_callable(expr):
    if callable(expr):
        return expr
    e = as_expr(expr)
    f = sp.lambdify((X1, X2), e, "numpy")
    return lambda x: np.broadcast_to(np.asarray(f(x[..., 0], x[..., 1]), dtype=float), x.shape[:-1]).copy()


class ScalarField:
    """Complex nodal values on a mesh, optionally backed by an exact function.

    Parameters
    ----------
    mesh : DiskMesh
    values : array_like, shape (n,)
    func, grad : callable, optional
        Exact ``x -> f(x)`` and ``x -> grad f(x)`` for off-node evaluation.
    """

    def __init__(self, mesh, values, func=None, grad=None):
        self.mesh = mesh
        self.values = np.asarray(values)
        if self.values.shape != (mesh.n,):
            raise ValueError("values must have one entry per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite field values")
        self.func = func
        self.grad = grad

    @classmethod
    def from_function(cls, mesh, func, grad=None):
        func = _as_callable(func)
        return cls(mesh, func(mesh.points), func=func, grad=grad)

    @classmethod
    def from_expr(cls, mesh, expr):
        """Field and exact gradient from a sympy-parsable expression in x1, x2."""
        e = as_expr(expr)
        f = _as_callable(e)
        gx, gy = (_as_callable(sp.diff(e, s)) for s in (X1, X2))
        return cls(mesh, f(mesh.points), func=f, grad=lambda x: np.stack([gx(x), gy(x)], axis=-1))

    @property
    def boundary_flag(self):
        return self.mesh.is_boundary

    def boundary_values(self):
        return self.values[self.mesh.boundary]

    def __add__(self, other):
        return ScalarField(self.mesh, self.values + other.values)

    def __mul__(self, c):
        return ScalarField(self.mesh, c * self.values)

    __rmul__ = __mul__


class OneFormField:
    """One-form a_1 dx^1 + a_2 dx^2 on a mesh.

    Parameters
    ----------
    mesh : DiskMesh
    values : array_like, shape (n, 2)
        Nodal Cartesian components.
    func : callable, optional
        Exact components ``x -> (..., 2)``.
    cochain : array_like, optional
        Exact edge integrals, one per ``mesh.edges`` row (oriented i -> j, i < j).
    """

    def __init__(self, mesh, values, func=None, cochain=None):
        self.mesh = mesh
        self.values = np.asarray(values)
        if self.values.shape != (mesh.n, 2):
            raise ValueError("values must have shape (n, 2)")
        self.func = func
        self._cochain = None if cochain is None else np.asarray(cochain)

    @classmethod
    def from_function(cls, mesh, func):
        return cls(mesh, func(mesh.points), func=func)

    @classmethod
    def from_expr(cls, mesh, exprs):
        """Components from two expressions in x1, x2."""
        f1, f2 = (_as_callable(e) for e in exprs)
        func = lambda x: np.stack([f1(x), f2(x)], axis=-1)
        return cls(mesh, func(mesh.points), func=func)

    @classmethod
    def zero(cls, mesh):
        return cls(mesh, np.zeros((mesh.n, 2)), func=lambda x: np.zeros(np.shape(x)))

    def is_real(self):
        return not np.iscomplexobj(self.values) or np.allclose(self.values.imag, 0)

    def cochain(self):
        """Edge line integrals of the form."""
        if self._cochain is not None:
            return self._cochain
        p = self.mesh.points
        e = self.mesh.edges
        a, b = p[e[:, 0]], p[e[:, 1]]
        d = b - a
        if self.func is not None:
            s = 0.5 * (_GL_X + 1)
            pts = a[:, None, :] + s[None, :, None] * d[:, None, :]
            vals = self.func(pts)
            c = 0.5 * np.einsum("k,eki,ei->e", _GL_W, vals, d)
        else:
            v = self.values
            c = 0.5 * np.einsum("ei,ei->e", v[e[:, 0]] + v[e[:, 1]], d)
        self._cochain = c
        return c

    def __add__(self, other):
        func = None
        if self.func is not None and other.func is not None:
            f, g = self.func, other.func
            func = lambda x: f(x) + g(x)
        return OneFormField(self.mesh, self.values + other.values, func=func,
                            cochain=self.cochain() + other.cochain())

    def __neg__(self):
        return -1.0 * self

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, c):
        func = None
        if self.func is not None:
            f = self.func
            func = lambda x: c * f(x)
        return OneFormField(self.mesh, c * self.values, func=func, cochain=c * self.cochain())

    __rmul__ = __mul__

    def evaluate(self, x):
        """Components at arbitrary points (exact if ``func`` is set, else P1)."""
        x = np.asarray(x, dtype=float)
        if self.func is not None:
            return self.func(x)
        P = self.mesh.interp_matrix(x.reshape(-1, 2))
        return (P @ self.values).reshape(x.shape[:-1] + (2,))


@dataclass
class HelmholtzSplit:
    solenoidal: OneFormField
    potential: ScalarField
    info: dict = field(default_factory=dict)


def nodal_from_cochain(mesh, c):
    """Least-squares nodal components reproducing edge integrals around each node."""
    p = mesh.points
    e = mesh.edges
    d = p[e[:, 1]] - p[e[:, 0]]
    wt = 1.0 / np.sum(d ** 2, axis=1)
    n = mesh.n
    A = np.zeros((n, 2, 2))
    rhs = np.zeros((n, 2), dtype=np.result_type(c, float))
    outer = wt[:, None, None] * d[:, :, None] * d[:, None, :]
    for k in (0, 1):
        np.add.at(A, e[:, k], outer)
        np.add.at(rhs, e[:, k], (wt * c)[:, None] * d)
    return np.linalg.solve(A, rhs[..., None])[..., 0]


def d(f):
    """Exterior derivative of a scalar field."""
    mesh = f.mesh
    e = mesh.edges
    c = f.values[e[:, 1]] - f.values[e[:, 0]]
    return OneFormField(mesh, nodal_from_cochain(mesh, c), func=f.grad, cochain=c)


def peierls_matrix(mesh, A):
    """Sparse magnetic difference G_A: (G_A v)_e = v_j e^{i t/2} - v_i e^{-i t/2}."""
    e = mesh.edges
    ne = len(e)
    if A is None:
        th = np.zeros(ne)
    else:
        th = np.real(A.cochain())
    ph = np.exp(0.5j * th)
    return sps.csr_matrix((np.r_[-np.conj(ph), ph],
                           (np.r_[np.arange(ne), np.arange(ne)], np.r_[e[:, 0], e[:, 1]])),
                          shape=(ne, mesh.n))


def d_A(f, A):
    """Magnetic differential d_A f = df + i f A as an edge cochain."""
    mesh = f.mesh
    if A is None:
        return d(f)
    c = peierls_matrix(mesh, A) @ f.values
    return OneFormField(mesh, nodal_from_cochain(mesh, c), cochain=c)


def d_star(alpha, metric):
    """Codifferential d* alpha = M^-1 D^T W alpha (weak form of the divergence)."""
    mesh = alpha.mesh
    fem = mesh.fem(metric)
    v = fem.D.T @ (fem.w * alpha.cochain())
    return ScalarField(mesh, v / fem.mass)


def d_A_star(beta, A, metric):
    mesh = beta.mesh
    fem = mesh.fem(metric)
    G = peierls_matrix(mesh, A)
    return ScalarField(mesh, (G.conj().T @ (fem.w * beta.cochain())) / fem.mass)


def magnetic_stiffness(mesh, metric, A):
    """Hermitian form sum_e w_e |(d_A v)_e|^2 assembled edge by edge."""
    fem = mesh.fem(metric)
    e = mesh.edges
    w = fem.w
    th = np.zeros(len(e)) if A is None else np.real(A.cochain())
    n = mesh.n
    diag = np.zeros(n)
    np.add.at(diag, e[:, 0], w)
    np.add.at(diag, e[:, 1], w)
    off = -w * np.exp(1j * th)
    H = sps.csr_matrix((np.r_[diag, off, np.conj(off)],
                        (np.r_[np.arange(n), e[:, 0], e[:, 1]], np.r_[np.arange(n), e[:, 1], e[:, 0]])),
                       shape=(n, n))
    return H


def magnetic_laplacian_apply(v, A, q, metric):
    """(-Delta_{g,A} + q) v at the nodes, in the weak (lumped) sense."""
    mesh = v.mesh
    fem = mesh.fem(metric)
    H = magnetic_stiffness(mesh, metric, A)
    qv = 0.0 if q is None else q.values
    return ScalarField(mesh, (H @ v.values) / fem.mass + qv * v.values)


def inner0(f, g, metric):
    fem = f.mesh.fem(metric)
    return np.sum(fem.mass * f.values * np.conj(g.values))


def inner1(a, b, metric):
    fem = a.mesh.fem(metric)
    return np.sum(fem.w * a.cochain() * np.conj(b.cochain()))


def helmholtz(A, metric, rtol=1e-12):
    """Split A = A_sol + d phi with d* A_sol = 0 and phi = 0 on the boundary.

    Solves the Dirichlet problem d*d phi = d*A by diagonally preconditioned CG.
    """
    mesh = A.mesh
    fem = mesh.fem(metric)
    I = mesh.interior
    c = A.cochain()
    rhs = (fem.D.T @ (fem.w * c))[I]
    KII = fem.K[I][:, I].tocsr()
    pre = sps.diags(1.0 / KII.diagonal())
    phiI = np.zeros(len(I), dtype=np.result_type(rhs, float))
    if np.linalg.norm(rhs) > 0:
        phiI, info = spla.cg(KII, rhs, rtol=rtol, atol=0.0, M=pre, maxiter=20 * len(I))
        if info != 0:
            res = np.linalg.norm(KII @ phiI - rhs) / np.linalg.norm(rhs)
            raise RuntimeError(f"Helmholtz CG did not converge, relative residual {res:.2e}")
    phi = np.zeros(mesh.n, dtype=phiI.dtype)
    phi[I] = phiI
    dphi = fem.D @ phi
    csol = c - dphi
    sol = OneFormField(mesh, nodal_from_cochain(mesh, csol), cochain=csol)
    res = np.linalg.norm(KII @ phiI - rhs) / max(np.linalg.norm(rhs), 1e-300)
    return HelmholtzSplit(sol, ScalarField(mesh, phi), {"cg_relative_residual": float(res)})


def _nodal_gradient(mesh, values):
    """Area-weighted average of the P1 element gradients at each node."""
    G = mesh.grads()
    ge = np.einsum("tai,ta->ti", G, values[mesh.tris])
    acc = np.zeros((mesh.n, 2), dtype=ge.dtype)
    wsum = np.zeros(mesh.n)
    for k in range(3):
        np.add.at(acc, mesh.tris[:, k], mesh.area[:, None] * ge)
        np.add.at(wsum, mesh.tris[:, k], mesh.area)
    return acc / wsum[:, None]


def _scalar_norm(mesh, metric, values, k):
    fem = mesh.fem(metric)
    tot = np.sum(fem.mass * np.abs(values) ** 2)
    if k >= 1:
        tot += np.real(np.conj(values) @ (fem.K @ values))
    if k >= 2:
        grad = _nodal_gradient(mesh, values)
        hess = np.stack([_nodal_gradient(mesh, grad[:, j]) for j in range(2)], axis=-1)
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        hess = hess - np.einsum("nkij,nk->nij", metric.christoffel(mesh.points), grad)
        gi = metric.ginv(mesh.points)
        h2 = np.einsum("nia,njb,nij,nab->n", gi, gi, hess, np.conj(hess))
        tot += np.sum(fem.mass * np.real(h2))
    return float(np.sqrt(max(tot, 0.0)))


def sobolev_norm(field_, k, metric):
    """Discrete H^k norm, k in {0, 1, 2}.

    Scalars: sqrt of the sum of squared L^2 norms of the covariant
    derivatives up to order k. One-forms: the same combination over the two
    Cartesian components (global chart convention).
    """
    if k not in (0, 1, 2):
        raise ValueError("k must be 0, 1 or 2")
    mesh = field_.mesh
    if isinstance(field_, OneFormField):
        return float(np.sqrt(sum(_scalar_norm(mesh, metric, field_.values[:, j], k) ** 2 for j in range(2))))
    return _scalar_norm(mesh, metric, field_.values, k)


def l2_norm(field_, metric):
    """Metric L^2 norm (cochain inner product for one-forms)."""
    if isinstance(field_, OneFormField):
        return float(np.sqrt(np.real(inner1(field_, field_, metric))))
    return float(np.sqrt(np.real(inner0(field_, field_, metric))))


def nodal_l2_norm(alpha, metric):
    """L^2 norm of a one-form from its nodal components, sum m_i |a_i|_g^2."""
    fem = alpha.mesh.fem(metric)
    gi = metric.ginv(alpha.mesh.points)
    a = alpha.values
    return float(np.sqrt(np.sum(fem.mass * np.real(np.einsum("ni,nij,nj->n", a, gi, np.conj(a))))))


# -- I/O --------------------------------------------------------------------

def write_field_csv(path, field_):
    mesh = field_.mesh
    p = mesh.points
    with open(path, "w") as fh:
        if isinstance(field_, OneFormField):
            fh.write("node_id,x,y,a1_re,a1_im,a2_re,a2_im\n")
            for i in range(mesh.n):
                a = field_.values[i]
                fh.write(f"{i},{p[i,0]:.16e},{p[i,1]:.16e},{a[0].real:.16e},{np.imag(a[0]):.16e},"
                         f"{a[1].real:.16e},{np.imag(a[1]):.16e}\n")
        else:
            fh.write("node_id,x,y,re,im\n")
            for i in range(mesh.n):
                v = field_.values[i]
                fh.write(f"{i},{p[i,0]:.16e},{p[i,1]:.16e},{v.real:.16e},{np.imag(v):.16e}\n")


def read_field_csv(path, mesh):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if data.shape[1] == 5:
        return ScalarField(mesh, data[:, 3] + 1j * data[:, 4])
    return OneFormField(mesh, np.stack([data[:, 3] + 1j * data[:, 4], data[:, 5] + 1j * data[:, 6]], axis=1))


def write_field_npz(path, field_):
    np.savez(path, points=field_.mesh.points, values=field_.values)
