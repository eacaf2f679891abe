"""Wave solver, hyperbolic and elliptic Dirichlet-to-Neumann maps.

Time stepping is Newmark average acceleration (trapezoidal in the first
order form), implicit and energy conserving. Neumann data are always
variational fluxes: the residual of the discrete equation tested against the
boundary hat functions, divided by the boundary arclength weights.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from numpy.polynomial import Polynomial

from .spectral import boundary_fourier, boundary_freqs, boundary_norm


class WaveError(ValueError):
    pass


class ResolventError(ValueError):
    pass


class TruncationError(RuntimeError):
    pass


# -- time stepping ------------------------------------------------------------------

def lu_solve(lu, r):
    """Solve with a SuperLU factor, splitting complex right-hand sides for real factors."""
    if np.iscomplexobj(r) and lu.L.dtype.kind != "c":
        return lu.solve(np.ascontiguousarray(r.real)) + 1j * lu.solve(np.ascontiguousarray(r.imag))
    return lu.solve(r)


class WaveSolver:
    """Cached factorizations for Newmark steps of M u'' + H u = M F."""

    def __init__(self, op, dt):
        self.op = op
        self.dt = float(dt)
        b = op.blocks()
        self.b = b
        self.lu = spla.splu((b["MII"] + (self.dt ** 2 / 4) * b["HII"]).tocsc())
        self._mlu = None

    def mass_solve(self, r):
        if self._mlu is None:
            self._mlu = spla.splu(self.b["MII"].tocsc())
        return lu_solve(self._mlu, r)


def second_difference(f, dt):
    """Central second difference in time, zero history before t=0, one-sided at T."""
    f = np.asarray(f)
    out = np.zeros_like(f)
    out[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / dt ** 2
    out[0] = (f[1] - 2 * f[0]) / dt ** 2
    if len(f) >= 4:
        out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / dt ** 2
    return out


@dataclass
class WaveState:
    """Result of :func:`solve_wave`.

    ``u`` has shape (nt+1, n, p) when stored, ``flux`` (nt+1, nb, p) is the
    boundary Neumann trace, ``norms`` holds per-step L2/H1/velocity norms.
    """
    t: np.ndarray
    dt: float
    flux: np.ndarray
    u: np.ndarray = None
    norms: dict = field(default_factory=dict)

    @property
    def T(self):
        return float(self.t[-1])


def solve_wave(op, f, dt, F=None, ftt=None, terminal=False, store=False, norms=False,
               u0=None, v0=None, solver=None, atol0=1e-12):
    """Solve u'' + E u = F on (0, T) x M with u = f on the boundary.

    Parameters
    ----------
    op : MagneticOperator
    f : array (nt+1, nb) or (nt+1, nb, p)
        Dirichlet data on the time grid t_n = n dt.
    F : array (nt+1, n[, p]) or callable n -> (n[, p]), optional
        Nodal source values; the load is M F.
    ftt : array like f, optional
        Second time derivative of f; central differences otherwise.
    terminal : bool
        Impose zero Cauchy data at t = T instead of t = 0.
    store : bool
        Keep the full space-time solution.
    norms : bool
        Record max-in-time diagnostics of ||u||, ||u_t|| and ||grad u||.
    """
    f = np.asarray(f)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[:, :, None]
        if ftt is not None:
            ftt = np.asarray(ftt)[:, :, None]
    nt = f.shape[0] - 1
    if nt < 2:
        raise WaveError("need at least two time steps")
    if terminal:
        Fr = None
        if F is not None:
            Fr = F[::-1] if not callable(F) else (lambda k: F(nt - k))
        st = solve_wave(op, f[::-1], dt, F=Fr, ftt=None if ftt is None else ftt[::-1], terminal=False,
                        store=store, norms=norms, u0=u0, v0=None if v0 is None else -v0, solver=solver)
        st.flux = st.flux[::-1]
        if st.u is not None:
            st.u = st.u[::-1]
        st.t = dt * np.arange(nt + 1)
        if squeeze:
            st.flux = st.flux[..., 0]
            if st.u is not None:
                st.u = st.u[..., 0]
        return st
    scale = max(np.abs(f).max(), 1e-300)
    if u0 is None and np.abs(f[0]).max() > atol0 * max(scale, 1.0):
        raise WaveError("boundary data must vanish at t = 0")
    solver = solver or WaveSolver(op, dt)
    if abs(solver.dt - dt) > 0:
        raise WaveError("solver time step mismatch")
    b = solver.b
    I, B = op.interior, op.boundary
    n, p = op.mesh.n, f.shape[2]
    if ftt is None:
        ftt = second_difference(f, dt)
    cplx = np.iscomplexobj(f) or op.is_complex() or (F is not None and np.iscomplexobj(
        F(0) if callable(F) else F))
    dtype = complex if cplx else float

    def load(k):
        if F is None:
            return None
        Fk = F(k) if callable(F) else F[k]
        Fk = np.asarray(Fk)
        if Fk.ndim == 1:
            Fk = Fk[:, None]
        return op.M @ Fk

    uI = np.zeros((len(I), p), dtype=dtype)
    vI = np.zeros((len(I), p), dtype=dtype)
    if u0 is not None:
        uI += np.asarray(u0).reshape(n, -1)[I]
    if v0 is not None:
        vI += np.asarray(v0).reshape(n, -1)[I]
    L0 = load(0)
    r = -(b["HIB"] @ f[0]) - b["MIB"] @ ftt[0] - b["HII"] @ uI
    if L0 is not None:
        r = r + L0[I]
    aI = solver.mass_solve(r) if np.any(r) else np.zeros_like(uI)
    flux = np.zeros((nt + 1, len(B), p), dtype=dtype)
    U = np.zeros((nt + 1, n, p), dtype=dtype) if store else None
    fem = op.mesh.fem(op.metric)
    rec = {"u_L2": [], "ut_L2": [], "grad_L2": []} if norms else None

    def record(k, uI, vI, aI, Lk):
        R = b["MBI"] @ aI + b["MBB"] @ ftt[k] + b["HBI"] @ uI + b["HBB"] @ f[k]
        if Lk is not None:
            R = R - Lk[B]
        flux[k] = R / op.bmass[:, None]
        if store or norms:
            u = np.zeros((n, p), dtype=dtype)
            u[I], u[B] = uI, f[k]
            if store:
                U[k] = u
            if norms:
                rec["u_L2"].append(np.sqrt(np.sum(fem.mass[:, None] * np.abs(u) ** 2, axis=0)))
                vv = np.zeros((n, p), dtype=dtype)
                vv[I] = vI
                if k > 0:
                    vv[B] = (f[k] - f[k - 1]) / dt
                rec["ut_L2"].append(np.sqrt(np.sum(fem.mass[:, None] * np.abs(vv) ** 2, axis=0)))
                rec["grad_L2"].append(np.sqrt(np.abs(np.sum(np.conj(u) * (fem.K @ u), axis=0))))

    record(0, uI, vI, aI, L0)
    h2 = dt * dt / 4
    for k in range(1, nt + 1):
        pred = uI + dt * vI + h2 * aI
        Lk = load(k)
        r = -(b["HII"] @ pred) - b["HIB"] @ f[k] - b["MIB"] @ ftt[k]
        if Lk is not None:
            r = r + Lk[I]
        an = lu_solve(solver.lu, r)
        uI = pred + h2 * an
        vI = vI + 0.5 * dt * (aI + an)
        aI = an
        record(k, uI, vI, aI, Lk)
    st = WaveState(dt * np.arange(nt + 1), dt, flux, U)
    if norms:
        st.norms = {k: np.array(v) for k, v in rec.items()}
    if squeeze:
        st.flux = st.flux[..., 0]
        if st.u is not None:
            st.u = st.u[..., 0]
        st.norms = {k: v[:, 0] for k, v in st.norms.items()}
    return st


def hyperbolic_dtn(op, f, dt, **kw):
    """Lambda_{A,q} f as the variational boundary flux of the wave solution."""
    return solve_wave(op, f, dt, **kw).flux


def discrete_energy(op, u, v):
    """0.5 (v^H M v + u^H H u) per column."""
    return 0.5 * np.real(np.sum(np.conj(v) * (op.M @ v), axis=0) + np.sum(np.conj(u) * (op.H @ u), axis=0))


# -- norms on the lateral boundary ----------------------------------------------------

def sigma_norm(g, dt, bmass, s=-1.0, pad=2):
    """H^s(Sigma) norm with multiplier (1 + omega^2 + l^2)^(s/2).

    The time direction is zero padded by ``pad`` to suppress wrap-around.
    ``g`` has shape (nt+1, nb) or (nt+1, nb, p).
    """
    g = np.asarray(g)
    nt = g.shape[0]
    N = pad * nt
    c = np.fft.fft(g * np.sqrt(dt), n=N, axis=0) / np.sqrt(N)
    w = np.sqrt(bmass)
    shape = (1, -1) + (1,) * (g.ndim - 2)
    c = np.fft.fft(c * w.reshape(shape), axis=1) / np.sqrt(len(w))
    om = 2 * np.pi * np.fft.fftfreq(N, dt)
    ell = boundary_freqs(len(w))
    mult = (1 + om[:, None] ** 2 + ell[None, :] ** 2) ** s
    mult = mult.reshape(mult.shape + (1,) * (g.ndim - 2))
    return np.sqrt(np.sum(mult * np.abs(c) ** 2, axis=(0, 1)))


def l2_sigma_norm(g, dt, bmass):
    g = np.asarray(g)
    w = bmass.reshape((1, -1) + (1,) * (g.ndim - 2))
    return np.sqrt(dt * np.sum(w * np.abs(g) ** 2, axis=(0, 1)))


def l2_hs_norm(g, dt, bmass, s=-0.75):
    """L^2(0,T; H^s(boundary)) with the Fourier multiplier (1+|l|)^s."""
    g = np.asarray(g)
    if g.ndim == 2:
        return float(np.sqrt(dt * np.sum(boundary_norm(g.T, bmass, s) ** 2)))
    return np.array([l2_hs_norm(g[..., j], dt, bmass, s) for j in range(g.shape[2])])


# -- probes ------------------------------------------------------------------------------

def time_window(T, power=8):
    """Polynomial C (t/T)^p (1 - t/T)^p normalized to unit maximum."""
    x = Polynomial([0, 1 / T])
    w = x ** power * (1 - x) ** power
    return w / w(T / 2)


@dataclass
class ProbeSet:
    """Boundary probes on the time grid, array (nt+1, nb, p) with second derivatives."""
    f: np.ndarray
    ftt: np.ndarray
    dt: float
    labels: list

    @property
    def size(self):
        return self.f.shape[2]

    def to_csv(self, path, values=None):
        write_sigma_csv(path, self.f if values is None else values)


def probe_dictionary(op, T, dt, n_random=256, lmax=6, kmax=4, seed=0, extra=None):
    """Random band-limited boundary probes times a smooth time window.

    Each probe is w(t) * sum_{|l|<=lmax, k<=kmax} c_{lk} e^{i l theta} sin(k pi t / T)
    with Gaussian coefficients, scaled to unit L2(Sigma) norm. ``extra`` is an
    optional list of (f, ftt) arrays (for instance GO traces) appended unchanged.
    """
    rng = np.random.default_rng(seed)
    nt = int(round(T / dt))
    t = dt * np.arange(nt + 1)
    ang = op.mesh.boundary_angle
    w = time_window(T, 4)
    ells = np.arange(-lmax, lmax + 1)
    ks = np.arange(1, kmax + 1)
    E = np.exp(1j * np.outer(ang, ells))
    fs, fts, labels = [], [], []
    for j in range(n_random):
        c = (rng.standard_normal((len(ells), len(ks))) + 1j * rng.standard_normal((len(ells), len(ks))))
        c /= np.sqrt(1 + np.abs(ells))[:, None]
        tm = np.zeros((len(t), len(ells)), dtype=complex)
        tmm = np.zeros_like(tm)
        for i, k in enumerate(ks):
            om = k * np.pi / T
            s, c_ = np.sin(om * t), np.cos(om * t)
            g = w(t) * s
            gtt = w.deriv(2)(t) * s + 2 * w.deriv(1)(t) * om * c_ - w(t) * om ** 2 * s
            tm += np.outer(g, c[:, i])
            tmm += np.outer(gtt, c[:, i])
        fj = tm @ E.T
        ftj = tmm @ E.T
        nrm = l2_sigma_norm(fj, dt, op.bmass)
        fs.append(fj / nrm)
        fts.append(ftj / nrm)
        labels.append(f"random-{j}")
    for i, (fe, fte) in enumerate(extra or []):
        fs.append(fe)
        fts.append(fte)
        labels.append(f"extra-{i}")
    if not fs:
        raise ValueError("empty probe set")
    return ProbeSet(np.stack(fs, axis=2), np.stack(fts, axis=2), dt, labels)


def dtn_operator_distance(op1, op2, probes, chunk=32, s=-1.0, return_all=False):
    """Probe-max lower estimate of ||Lambda_1 - Lambda_2|| from L2(Sigma) to H^-1(Sigma)."""
    if probes.size == 0:
        raise ValueError("empty probe set")
    dt = probes.dt
    s1, s2 = WaveSolver(op1, dt), WaveSolver(op2, dt)
    ratios = []
    for j0 in range(0, probes.size, chunk):
        f = probes.f[:, :, j0:j0 + chunk]
        ftt = probes.ftt[:, :, j0:j0 + chunk]
        d = (solve_wave(op1, f, dt, ftt=ftt, solver=s1).flux
             - solve_wave(op2, f, dt, ftt=ftt, solver=s2).flux)
        ratios.append(sigma_norm(d, dt, op1.bmass, s) / l2_sigma_norm(f, dt, op1.bmass))
    ratios = np.concatenate(ratios)
    val = float(ratios.max())
    if return_all:
        return val, {"ratios": ratios, "lower_bound": True}
    return val


def write_sigma_csv(path, values):
    """CSV rows (probe_id, t_index, boundary_index, re, im)."""
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[:, :, None]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["probe_id", "t_index", "boundary_index", "re", "im"])
        for p in range(v.shape[2]):
            for k in range(v.shape[0]):
                for b in range(v.shape[1]):
                    z = v[k, b, p]
                    wr.writerow([p, k, b, f"{np.real(z):.12e}", f"{np.imag(z):.12e}"])


# -- elliptic DtN -----------------------------------------------------------------------

def _check_resolvent(op, z, tol=1e-6):
    lower = op.shift + float(np.min(op.q))
    if z < lower:
        return
    b = op.blocks()
    lam = spla.eigsh(b["HII"], k=1, M=b["MII"], sigma=z, which="LM", return_eigenvectors=False)
    if np.min(np.abs(np.real(lam) - z)) < tol * max(1.0, abs(z)):
        raise ResolventError(f"z = {z} is within {tol} of an eigenvalue")


def elliptic_derivatives(op, z, f, m=0, check=True):
    """Pi(z) f and its z-derivatives up to order m by recursive Dirichlet solves.

    With u^(0) the solution of (E - z) u = 0, u = f on the boundary, and
    (E - z) u^(j) = j u^(j-1), u^(j) = 0 on the boundary, the j-th derivative
    of the flux is bmass^-1 [(H - zM) u^(j) - j M u^(j-1)]_B.
    Returns a list of boundary arrays [Pi, Pi', ..., Pi^(m)].
    """
    if check:
        _check_resolvent(op, z)
    b = op.blocks()
    f = np.asarray(f)
    squeeze = f.ndim == 1
    if squeeze:
        f = f[:, None]
    cplx = op.is_complex() or np.iscomplexobj(f) or op.M.dtype.kind == "c"
    A = (b["HII"] - z * b["MII"]).tocsc()
    lu = spla.splu(A.astype(complex) if cplx and A.dtype.kind != "c" else A)
    uI = lu.solve(-(b["HIB"] - z * b["MIB"]) @ f)
    uB = f
    out = [((b["HBI"] - z * b["MBI"]) @ uI + (b["HBB"] - z * b["MBB"]) @ uB) / op.bmass[:, None]]
    for j in range(1, m + 1):
        rhs = j * (b["MII"] @ uI + b["MIB"] @ uB)
        nI = lu.solve(rhs)
        flux = ((b["HBI"] - z * b["MBI"]) @ nI - j * (b["MBI"] @ uI + b["MBB"] @ uB)) / op.bmass[:, None]
        out.append(flux)
        uI, uB = nI, np.zeros_like(uB)
    if squeeze:
        out = [o[:, 0] for o in out]
    return out


def elliptic_dtn(op, z, f, return_solution=False):
    """Pi_{A,q}(z) f: variational flux of the Dirichlet problem (E - z) u = 0, u = f."""
    _check_resolvent(op, z)
    b = op.blocks()
    f = np.asarray(f)
    A = (b["HII"] - z * b["MII"]).tocsc()
    if np.iscomplexobj(f) and A.dtype.kind != "c":
        A = A.astype(complex)
    lu = spla.splu(A)
    uI = lu.solve(-(b["HIB"] - z * b["MIB"]) @ f)
    flux = ((b["HBI"] - z * b["MBI"]) @ uI + (b["HBB"] - z * b["MBB"]) @ f)
    flux = flux / (op.bmass if f.ndim == 1 else op.bmass[:, None])
    if return_solution:
        u = np.zeros((op.mesh.n,) + f.shape[1:], dtype=uI.dtype)
        u[op.interior], u[op.boundary] = uI, f
        return flux, u
    return flux


def trace_coefficients(S, f):
    """(f, psi_k) in L2(boundary), columns of f map to rows of the result's columns."""
    return (np.conj(S.psi).T * S.bmass) @ f


def _halving_tail(partial_full, partial_half, order):
    """Tail beyond K from the change between K/2 and K modes, assuming k^-order decay."""
    return np.abs(partial_full - partial_half) / (2.0 ** (order - 1) - 1)


def dtn_z_derivative_series(S, m, z, f, strict=True, tail_tol=0.1, return_tail=False):
    """(d/dz)^m Pi(z) f = -m! sum_k (f, psi_k) psi_k / (lambda_k - z)^(m+1).

    The tail beyond K is estimated from the difference between the K/2 and K
    partial sums, assuming the terms decay like k^-m (Weyl law with the trace
    growth ||psi_k||^2 ~ lambda_k); a TruncationError is raised above
    ``tail_tol`` times the value.
    """
    if strict and m < 3:
        raise ValueError("the series converges in H^1/2 only for m >= 3 when n = 2")
    lam = S.lambdas
    if np.min(np.abs(lam - z)) < 1e-6 * max(1.0, abs(z)):
        raise ResolventError("z too close to the spectrum")
    f = np.asarray(f)
    c = trace_coefficients(S, f)
    den = (lam - z) ** (m + 1)
    coef = c / (den if f.ndim == 1 else den[:, None])
    val = -math.factorial(m) * (S.psi @ coef)
    half = -math.factorial(m) * (S.psi[:, :S.K // 2] @ coef[:S.K // 2])
    w = S.bmass if f.ndim == 1 else S.bmass[:, None]
    tail = np.sqrt(np.sum(w * _halving_tail(val, half, m) ** 2, axis=0))
    vn = np.sqrt(np.sum(w * np.abs(val) ** 2, axis=0))
    if np.any(tail > tail_tol * vn + 1e-14):
        raise TruncationError(f"tail estimate {np.max(tail):.2e} exceeds {tail_tol:.0%} of the value")
    if return_tail:
        return val, tail
    return val


def resolvent_series_check(S, op, z, h, K_list=(16, 32, 64)):
    """Compare sum_k (h, phi_k) phi_k / (lambda_k - z) with the direct solve."""
    hv = h.values if hasattr(h, "values") else np.asarray(h)
    b = op.blocks()
    I = op.interior
    Mh = op.M @ hv
    A = (b["HII"] - z * b["MII"]).tocsc()
    if np.iscomplexobj(Mh) and A.dtype.kind != "c":
        A = A.astype(complex)
    v = np.zeros(op.mesh.n, dtype=np.result_type(A.dtype, Mh.dtype))
    v[I] = spla.spsolve(A, Mh[I])
    fem = op.mesh.fem(op.metric)

    def nrm(x):
        return float(np.sqrt(np.sum(fem.mass * np.abs(x) ** 2)))

    coeffs = np.conj(S.phi).T @ Mh
    errs = {}
    for K in K_list:
        if K > S.K:
            raise ValueError("K exceeds available modes")
        vs = S.phi[:, :K] @ (coeffs[:K] / (S.lambdas[:K] - z))
        errs[int(K)] = nrm(vs - v) / nrm(v)
    return {"z": z, "errors": errs, "direct_norm": nrm(v),
            "monotone": bool(np.all(np.diff([errs[k] for k in K_list]) <= 1e-12))}


# -- spectral to hyperbolic bridge ---------------------------------------------------------------

def _poly_sin_conv(g, om, t):
    """int_0^t sin(om (t - s)) / om * g(s) ds for a polynomial g, exactly."""
    # antiderivative of g(s) e^{i om s}: e^{i om s} sum_j (-1)^j g^(j)(s) / (i om)^(j+1)
    def prim(s):
        acc = np.zeros_like(s, dtype=complex)
        d = g
        for j in range(g.degree() + 1):
            acc += (-1) ** j * d(s) / (1j * om) ** (j + 1)
            d = d.deriv()
        return np.exp(1j * om * s) * acc

    P = prim(t) - prim(np.zeros_like(t))
    C, Sn = P.real, P.imag
    return (np.sin(om * t) * C - np.cos(om * t) * Sn) / om


@dataclass
class DtNBridgeReport:
    series_parts: list
    remainder: np.ndarray
    reference: np.ndarray
    relative_error: float
    relative_error_without_remainder: float
    tail_estimate: float
    s: float = -0.75

    def to_json(self, path=None):
        doc = {"relative_error": self.relative_error,
               "relative_error_without_remainder": self.relative_error_without_remainder,
               "tail_estimate": self.tail_estimate, "s": self.s,
               "series_part_norms": [float(np.linalg.norm(p)) for p in self.series_parts],
               "remainder_norm": float(np.linalg.norm(self.remainder))}
        text = json.dumps(doc, indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def check_probe_vanishing(w, order=7, tol=1e-10):
    for j in range(order + 1):
        if abs(w.deriv(j)(0.0)) > tol * max(1.0, np.max(np.abs(w.coef))):
            raise ValueError(f"probe time profile violates vanishing derivative of order {j} at t = 0")


def bridge_dtn(S, op, w, h, T, dt, n=2):
    """Spectral representation of Lambda f for f(t, x) = w(t) h(x).

    The series part uses Pi^(j)(0) for j <= n+1 from recursive Dirichlet
    solves; the remainder is
    -sum_k lambda_k^-(n+2) psi_k int_0^t s_k(t-s) (d_s^(2n+4) f(s), psi_k) ds.
    Returns (series parts, remainder, remainder with K/2 modes).
    """
    check_probe_vanishing(w, 2 * n + 3)
    nt = int(round(T / dt))
    t = dt * np.arange(nt + 1)
    h = np.asarray(h)
    der = elliptic_derivatives(op, 0.0, h, m=n + 1)
    parts = []
    for j in range(n + 2):
        # (-d_t^2)^j w
        wj = (-1) ** j * w.deriv(2 * j)(t) if j > 0 else w(t)
        parts.append(np.outer(wj, der[j]) / math.factorial(j))
    g = w.deriv(2 * n + 4)
    c = trace_coefficients(S, h)
    rem = np.zeros((nt + 1, len(h)), dtype=np.result_type(c.dtype, S.psi.dtype))
    half = None
    for k in range(S.K):
        if k == S.K // 2:
            half = rem.copy()
        lk = S.lambdas[k]
        conv = _poly_sin_conv(g, np.sqrt(lk), t)
        rem -= np.outer(conv, S.psi[:, k] * (c[k] / lk ** (n + 2)))
    return parts, rem, half


def spectral_to_hyperbolic_bridge(S, op, w, h, T, dt, n=2, s=-0.75, tail_tol=0.1, reference=None):
    """Compare the spectral representation of Lambda f with the time-domain flux.

    ``f(t, x) = w(t) h(x)`` with ``w`` a numpy Polynomial vanishing to order
    2n+3 at t = 0 and ``h`` boundary values; see :func:`bridge_dtn`.
    """
    parts, rem, half = bridge_dtn(S, op, w, h, T, dt, n)
    t = dt * np.arange(rem.shape[0])
    h = np.asarray(h)
    tail = l2_hs_norm(_halving_tail(rem, half, n + 2), dt, op.bmass, s)
    series = sum(parts)
    total = series + rem
    if reference is None:
        f = np.outer(w(t), h)
        ftt = np.outer(w.deriv(2)(t), h)
        reference = hyperbolic_dtn(op, f, dt, ftt=ftt)
    ref_n = l2_hs_norm(reference, dt, op.bmass, s)
    if tail > tail_tol * l2_hs_norm(total, dt, op.bmass, s):
        raise TruncationError(f"remainder tail {tail:.2e} too large")
    err = l2_hs_norm(total - reference, dt, op.bmass, s) / ref_n
    err0 = l2_hs_norm(series - reference, dt, op.bmass, s) / ref_n
    return DtNBridgeReport(parts, rem, reference, float(err), float(err0), tail, s)


# -- P^(j) estimates and resolvent smoothing ------------------------------------------------------

def fourier_probes(op, lmax):
    """Boundary Fourier modes e^{i l theta}, |l| <= lmax, scaled to unit H^1/2 norm."""
    ang = op.mesh.boundary_angle
    ells = np.arange(-lmax, lmax + 1)
    E = np.exp(1j * np.outer(ang, ells))
    return E / boundary_norm(E, op.bmass, 0.5)[None, :], ells


def _hs_matrix(op, s):
    nb = len(op.bmass)
    ell = boundary_freqs(nb)
    return ell, (1 + ell) ** s


def operator_norm_half_to_s(op, D, s=-0.75):
    """Largest singular value of D (boundary columns from unit H^1/2 probes) into H^s."""
    c = boundary_fourier(D, op.bmass)
    _, mult = _hs_matrix(op, s)
    return float(np.linalg.svd(mult[:, None] * c, compute_uv=False)[0])


def p_operator_norms(op1, op2, z_list, j_list=(0, 1, 2), s=-0.75, lmax=None):
    """Band-limited operator norms of d^j/dz^j (Pi_1 - Pi_2)(z), H^1/2 -> H^s.

    Returns a dict with the norm table and the fitted |z| slope per j.
    """
    nb = len(op1.bmass)
    lmax = lmax or nb // 2 - 1
    E, _ = fourier_probes(op1, lmax)
    J = max(j_list)
    table = np.zeros((len(j_list), len(z_list)))
    for iz, z in enumerate(z_list):
        d1 = elliptic_derivatives(op1, z, E, m=J)
        d2 = elliptic_derivatives(op2, z, E, m=J)
        for ij, j in enumerate(j_list):
            table[ij, iz] = operator_norm_half_to_s(op1, d1[j] - d2[j], s)
    slopes = {}
    x = np.log(np.abs(np.asarray(z_list, dtype=float)))
    for ij, j in enumerate(j_list):
        y = table[ij]
        slopes[int(j)] = float(np.polyfit(x, np.log(y), 1)[0]) if np.all(y > 0) else float("nan")
    return {"z": list(z_list), "j": list(j_list), "norms": table, "slopes": slopes,
            "predicted": {int(j): -j + s / 2 + 0.25 for j in j_list}}


def resolvent_smoothing_table(op, z_list=(-1, -4, -16, -64), sigmas=(0, 1, 2)):
    """Discrete operator norms of f -> v, (E - z) v = f, v = 0 on the boundary, L2 -> H^sigma.

    The H^sigma norms are sqrt(v^H N v) with N = M, M + K and M + K + K M^-1 K
    (lumped mass), so the sup over f is the top eigenvalue of a dense Gram matrix.
    """
    fem = op.mesh.fem(op.metric)
    I = op.interior
    b = op.blocks()
    m = fem.mass[I]
    K = fem.K[I][:, I].toarray()
    Ns = {0: np.diag(m), 1: np.diag(m) + K, 2: np.diag(m) + K + K @ (K / m[:, None])}
    HII = b["HII"].toarray()
    MII = b["MII"].toarray()
    sq = np.sqrt(m)
    table = np.zeros((len(sigmas), len(z_list)))
    for iz, z in enumerate(z_list):
        # v = (H - zM)^-1 M f; with g = sqrt(m) f in l2, v = X g
        X = sla.solve(HII - z * MII, MII / sq[None, :])
        for i, sgm in enumerate(sigmas):
            G = np.conj(X).T @ Ns[sgm] @ X
            table[i, iz] = np.sqrt(max(np.linalg.eigvalsh(0.5 * (G + np.conj(G).T))[-1], 0))
    x = np.log(np.abs(np.asarray(z_list, dtype=float)))
    slopes = {int(sg): float(np.polyfit(x, np.log(table[i]), 1)[0]) for i, sg in enumerate(sigmas)}
    return {"z": list(z_list), "sigma": list(sigmas), "norms": table, "slopes": slopes,
            "predicted": {int(sg): sg / 2 - 1 for sg in sigmas}}


def resolvent_boundary_table(op, z_list=(-1, -4, -16), lmax=8):
    """max over Fourier probes h of ||w||_L2 / ||h||_H^1/2 for the homogeneous problem."""
    E, _ = fourier_probes(op, lmax)
    fem = op.mesh.fem(op.metric)
    out = []
    for z in z_list:
        _, u = elliptic_dtn(op, z, E, return_solution=True)
        out.append(float(np.max(np.sqrt(np.sum(fem.mass[:, None] * np.abs(u) ** 2, axis=0)))))
    return {"z": list(z_list), "ratios": out}
