import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from artifact.go_solutions import (GOAnsatz, PolarGeometry, ResolutionError, Window, amplitude_alpha,
                                   amplitude_beta, assemble_ansatz, default_eps, eikonal_phase, remainder_solve,
                                   report_json, residual_norm, residual_scaling_check)
from artifact.geometry import MetricField, polar_chart
from artifact.spectral import assemble

Y = np.array([-1.2, 0.0])
T = 4.8


def swirl(amp):
    def A(x):
        b = np.clip(1 - np.sum(x ** 2, axis=-1), 0, None) ** 3
        return amp * np.stack([-x[..., 1], x[..., 0]], axis=-1) * b[..., None]
    return A


def dx1(x):
    return np.broadcast_to([1.0, 0.0], np.shape(x)).copy()


def test_window_normalized_and_supported():
    w = Window(0.6)
    # w^2 is a degree 12 polynomial on its support: 10-point Gauss-Legendre is exact
    x, wt = np.polynomial.legendre.leggauss(10)
    assert 0.3 * wt @ w(0.9 + 0.3 * x) ** 2 == pytest.approx(1.0, abs=1e-12)
    assert w(np.array([0.59, 1.21])).tolist() == [0.0, 0.0]
    # C^2 at the support ends
    for k in (1, 2):
        assert abs(w.poly.deriv(k)(0.6)) < 1e-9 and abs(w.poly.deriv(k)(1.2)) < 1e-9


def test_default_eps(euclid):
    assert default_eps(T, euclid) == pytest.approx((T - 2.4) / 4)
    with pytest.raises(ValueError):
        default_eps(2.0, euclid)


def test_eikonal_euclidean(mesh, euclid):
    psi = eikonal_phase(euclid, Y, mesh)
    assert np.allclose(psi.values, np.linalg.norm(mesh.points - Y, axis=1), atol=1e-12)
    assert psi.func(np.array([[-1.0, 0.0]]))[0] == pytest.approx(0.2)


def test_eikonal_gradient_unit(mesh, conformal):
    psi = eikonal_phase(conformal, Y)
    x = mesh.points[np.linalg.norm(mesh.points, axis=1) < 0.95]
    e = 1e-5
    g = np.stack([(psi(x + e * u) - psi(x - e * u)) / (2 * e) for u in np.eye(2)], axis=-1)
    gn2 = np.einsum("ni,nij,nj->n", g, conformal.ginv(x), g)
    assert np.max(np.abs(gn2 - 1)) < 1e-3


def test_alpha_euclidean_closed_form(euclid):
    geo = PolarGeometry(euclid, Y)
    w = Window(default_eps(T, euclid))
    alpha = amplitude_alpha(geo, w, "mu", T)
    x = np.array([[0.1, 0.2], [-0.5, -0.3], [0.4, 0.0]])
    t = np.linspace(0, T, 41)
    r = np.linalg.norm(x - Y, axis=1)
    th = np.arctan2(x[:, 1] - Y[1], x[:, 0] - Y[0])
    ref = r[None] ** -0.5 * w(t[:, None] - r[None]) * np.cos(th)[None]
    assert np.allclose(alpha(t, x), ref, atol=1e-13)


def test_alpha_support(euclid, mesh):
    geo = PolarGeometry(euclid, Y)
    w = Window(default_eps(T, euclid))
    a = amplitude_alpha(geo, w, "one", T)
    t = np.r_[np.linspace(0, w.eps, 5), np.linspace(T - w.eps, T, 5)]
    assert np.all(a(t, mesh.points) == 0)


def test_alpha_transport_conformal(conformal):
    chart = polar_chart(conformal, Y)
    geo = PolarGeometry(conformal, Y, chart)
    w = Window(default_eps(T, conformal))
    alpha = amplitude_alpha(geo, w, "one", T)
    th = np.array([-0.3, 0.0, 0.25])
    r = np.linspace(0.4, 1.8, 15)
    t0 = r + 1.5 * w.eps
    e = 1e-4
    R, TH = np.meshgrid(r, th)
    t0 = np.broadcast_to(t0, R.shape)

    def a(t, rr):
        x = geo.at(rr, TH)["x"].reshape(-1, 2)
        vals = np.array([alpha(np.array([ti]), xi[None])[0, 0] for ti, xi in zip(t.ravel(), x)])
        return vals.reshape(R.shape)

    # transport along characteristics: 2 (d_t + d_r) alpha + rho_r / (2 rho) alpha = 0
    Dt = (a(t0 + e, R) - a(t0 - e, R)) / (2 * e)
    Dr = (a(t0, R + e) - a(t0, R - e)) / (2 * e)
    rho_r = (chart.rho_at(R + e, TH) - chart.rho_at(R - e, TH)) / (2 * e)
    a0 = a(t0, R)
    res = 2 * (Dt + Dr) + rho_r / (2 * chart.rho_at(R, TH)) * a0
    assert np.max(np.abs(res)) < 1e-3 * np.max(np.abs(a0))


def test_beta_trivial_and_unimodular(euclid, mesh):
    geo = PolarGeometry(euclid, Y)
    assert np.all(amplitude_beta(geo, None)(np.array([1.0]), mesh.points) == 1)
    b = amplitude_beta(geo, swirl(3.0))(np.array([1.0, 2.0]), mesh.points)
    assert np.max(np.abs(np.abs(b) - 1)) < 1e-12


def test_beta_phase_dx1_diameter(euclid):
    geo = PolarGeometry(euclid, Y)
    b = amplitude_beta(geo, dx1)
    r = np.array([0.5, 0.9, 1.7, 2.1])
    x = Y + r[:, None] * np.array([1.0, 0.0])
    phase = np.angle(b(np.array([2.0]), x)[0])
    # sigma = <dx1, e1> = 1 on the part of the chord inside M
    ref = np.array([-quad(lambda s: float(abs(Y[0] + s) < 1), 0, ri, points=[0.2, 2.2], epsabs=1e-14)[0]
                    for ri in r])
    assert np.max(np.abs(np.angle(np.exp(1j * (phase - ref))))) < 1e-8


def test_ansatz_modulus_independent_of_h(euclid, mesh):
    t = np.linspace(0, T, 25)
    mods = [np.abs(assemble_ansatz(euclid, Y, h, T, A=swirl(1.0)).values(t, mesh.points)) for h in (0.2, 0.05)]
    assert np.allclose(mods[0], mods[1], atol=1e-13)
    geo = PolarGeometry(euclid, Y)
    alpha = amplitude_alpha(geo, Window(default_eps(T, euclid)), "one", T)
    assert np.allclose(mods[0], np.abs(alpha(t, mesh.points)), atol=1e-13)


def test_ansatz_support_discipline(euclid, mesh):
    ans = assemble_ansatz(euclid, Y, 0.1, T)
    t = np.array([0.0, 0.3 * ans.eps, ans.eps])
    assert np.all(ans.values(t, mesh.points) == 0)
    assert np.all(ans.second_time_derivative(t, mesh.points) == 0)


def test_ansatz_conjugation(euclid, mesh):
    t = np.linspace(0, T, 17)
    a = assemble_ansatz(euclid, Y, 0.1, T, A=swirl(1.0))
    b = assemble_ansatz(euclid, Y, -0.1, T, A=swirl(-1.0))
    # the full phase (psi - t)/h flips with h, beta_{-A} = conj beta_A
    assert np.allclose(b.values(t, mesh.points), np.conj(a.values(t, mesh.points)), atol=1e-13)
    Ap = assemble_ansatz(euclid, Y, 0.1, T, A=swirl(1.0), use_beta=True)
    Am = assemble_ansatz(euclid, Y, 0.1, T, A=swirl(-1.0), use_beta=True)
    G_p = Ap.spatial(*Ap.geometry.polar(mesh.points), need_residual=False)["G"]
    G_m = Am.spatial(*Am.geometry.polar(mesh.points), need_residual=False)["G"]
    assert np.allclose(G_m, np.conj(G_p), atol=1e-13)


def test_transport_residuals_vanish(conformal):
    ans = assemble_ansatz(conformal, Y, 0.1, T, A=swirl(1.0))
    r = np.linspace(0.4, 1.8, 12)
    th = np.linspace(-0.5, 0.5, 7)
    R, TH = np.meshgrid(r, th)
    sp = ans.spatial(R, TH)
    # coefficient of p'(t - r) collects both transport equations
    assert np.max(np.abs(sp["C1"])) < 1e-3 * np.max(np.abs(sp["G"]))


def test_residual_slope_flat():
    m = MetricField()
    rep = residual_scaling_check(m, Y, T, A=swirl(0.3), control=True)
    assert abs(rep["slope"]) <= 0.2
    assert rep["control_slope"] <= -0.7


def test_residual_with_q_only_bounded(euclid):
    q = lambda x: 0.5 * np.exp(-np.sum(x ** 2, -1))
    r0 = residual_scaling_check(euclid, Y, T, h_list=(0.2, 0.1, 0.05))
    rq = residual_scaling_check(euclid, Y, T, h_list=(0.2, 0.1, 0.05), q=q)
    assert abs(rq["slope"]) < 0.05
    ans = assemble_ansatz(euclid, Y, 0.1, T)
    # |q u0| is h independent: its L2 norm is at most 0.5 * ||alpha||
    assert max(rq["residual_L2"]) <= max(r0["residual_L2"]) + 0.5 * 1.2


def test_resolution_guard(euclid):
    with pytest.raises(ResolutionError):
        residual_norm(assemble_ansatz(euclid, Y, 0.01, T), ns=24)


def test_h_list_must_decrease(euclid):
    with pytest.raises(ValueError):
        residual_scaling_check(euclid, Y, T, h_list=(0.05, 0.1))


@pytest.fixture(scope="module")
def remainders(mesh, euclid):
    op = assemble(mesh, euclid, mass="averaged")
    out = {}
    for terminal in (False, True):
        out[terminal] = [remainder_solve(op, assemble_ansatz(euclid, Y, h, T), terminal=terminal)[1]
                         for h in (0.2, 0.1, 0.05)]
    return out


def test_remainder_h_uniform(remainders):
    s = [r["scaled_remainder"] for r in remainders[False]]
    assert max(s) / min(s) < 3
    r = [x["max_r_L2"] for x in remainders[False]]
    assert np.log2(r[1] / r[2]) >= 0.8


def test_remainder_terminal_variant(remainders):
    s = [r["scaled_remainder"] for r in remainders[True]]
    assert max(s) / min(s) < 3


class PlaneGeometry(PolarGeometry):
    """Cartesian stand-in: r = x1 - y1, theta = x2, rho = 1 (plane waves are exact)."""

    def at(self, r, th):
        r, th = np.broadcast_arrays(np.asarray(r, float), np.asarray(th, float))
        z, one = np.zeros_like(r), np.ones_like(r)
        x = np.stack([self.y[0] + r, th], -1)
        return {"x": x, "v": np.stack([one, z], -1), "J": np.stack([z, one], -1), "rho": one, "rho_r": z,
                "rho_rr": z, "rho_t": z, "rho_tt": z}

    def polar(self, x):
        x = np.asarray(x, float)
        return x[..., 0] - self.y[0], x[..., 1]


def test_remainder_zero_for_exact_solution(mesh, euclid):
    geo = PlaneGeometry(euclid, Y)
    ans = GOAnsatz(euclid, Y, 0.1, T, Window(default_eps(T, euclid)), "one", geometry=geo)
    op = assemble(mesh, euclid, mass="averaged")
    st_, rep = remainder_solve(op, ans)
    assert rep["max_r_L2"] == 0.0


def test_report_json(remainders, tmp_path):
    doc = json.loads(report_json(remainders[False][0], tmp_path / "r.json"))
    assert doc["h"] == 0.2 and "scaled_remainder" in doc


@settings(max_examples=15, deadline=None)
@given(st.floats(0.02, 0.3), st.floats(-1.2, 1.2), st.floats(1.0, 3.0))
def test_beta_unimodular_property(h, th, r):
    m = MetricField()
    ans = assemble_ansatz(m, Y, h, T, A=swirl(2.0))
    G = ans.spatial(np.array([r]), np.array([th]), need_residual=False)["G"]
    rho = r ** 2
    assert abs(abs(G[0]) - rho ** -0.25) < 1e-12
