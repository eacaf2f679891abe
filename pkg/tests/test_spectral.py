import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import jn_zeros

from artifact.fields import OneFormField, ScalarField, d
from artifact.mesh import DiskMesh
from artifact.spectral import (SpectralError, WeightedSeqNorm, assemble, boundary_norm, delta, dirichlet_eigs,
                               neumann_trace, weyl_constant)

J01 = jn_zeros(0, 1)[0] ** 2


def rot(x):
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


@pytest.fixture(scope="module")
def flat(mesh, euclid):
    op = assemble(mesh, euclid)
    return op, dirichlet_eigs(op, 64)


@pytest.fixture(scope="module")
def gauge_pair(mesh, conformal):
    A = OneFormField.from_function(mesh, lambda x: 0.4 * rot(x))
    phi = ScalarField.from_expr(mesh, "(1 - x1**2 - x2**2)*(0.5 + x1 - 0.3*x2**2)")
    op1 = assemble(mesh, conformal, A)
    op2 = assemble(mesh, conformal, A + d(phi))
    return op1, op2, phi


def test_flat_operator_is_real_symmetric(flat):
    op, _ = flat
    assert not np.iscomplexobj(op.H.data)
    assert abs(op.H - op.H.T).max() < 1e-14


def test_magnetic_operator_complex_hermitian(gauge_pair):
    op1, _, _ = gauge_pair
    assert op1.is_complex()
    assert abs(op1.H - op1.H.conj().T).max() < 1e-14


def test_gauge_pair_unitarily_equivalent(gauge_pair):
    op1, op2, phi = gauge_pair
    D = np.exp(1j * phi.values)
    H1 = op1.H.toarray()
    assert np.max(np.abs(op2.H.toarray() - np.conj(D)[:, None] * H1 * D[None, :])) < 1e-8


def test_first_eigenvalue_bessel(flat):
    _, S = flat
    assert abs(S.lambdas[0] - J01) / J01 < 0.01
    # J_n zeros, doubly degenerate for n >= 1
    ref = np.sort(np.concatenate([jn_zeros(n, 4) ** 2 for n in range(6)]
                                 + [jn_zeros(n, 4) ** 2 for n in range(1, 6)]))[:10]
    assert np.max(np.abs(S.lambdas[:10] - ref) / ref) < 0.02


def test_double_eigenvalue(flat):
    _, S = flat
    j11 = jn_zeros(1, 1)[0] ** 2
    assert abs(S.lambdas[1] - S.lambdas[2]) < 1e-3 * S.lambdas[1]
    assert abs(S.lambdas[1] - j11) / j11 < 0.01


def test_constant_q_shifts_spectrum(mesh, euclid, flat):
    _, S = flat
    S2 = dirichlet_eigs(assemble(mesh, euclid, q=np.full(mesh.n, 2.5)), 64)
    assert np.max(np.abs(S2.lambdas - S.lambdas - 2.5)) < 1e-8


def test_eigen_invariants(flat):
    op, S = flat
    assert np.all(np.diff(S.lambdas) >= -1e-12)
    G = S.phi.T @ (op.M @ S.phi)
    assert np.max(np.abs(G - np.eye(S.K))) < 1e-8
    assert np.all(S.residuals < 1e-8 * (1 + np.abs(S.lambdas)))
    C = weyl_constant(S.lambdas)
    k = np.arange(1, S.K + 1)
    assert np.all(k / C <= 1 + S.lambdas + 1e-12) and np.all(1 + S.lambdas <= C * k + 1e-12)


def test_trace_growth_at_most_linear(flat):
    op, S = flat
    n = np.sqrt(np.sum(op.bmass[:, None] * np.abs(S.psi) ** 2, axis=0))
    ratio = n / (1 + S.lambdas)
    assert ratio.max() / ratio[:4].max() < 2.0


def test_ground_state_trace(flat):
    op, S = flat
    psi = S.psi[:, 0]
    assert np.all(np.sign(psi) == np.sign(psi[0]))
    assert np.std(psi) / abs(np.mean(psi)) < 0.01
    assert np.allclose(neumann_trace(op, S.phi[:, :1])[:, 0], psi, rtol=1e-8)


def test_green_identity_closure(gauge_pair):
    op, _, _ = gauge_pair
    S = dirichlet_eigs(op, 8)
    v = np.cos(op.mesh.points[:, 0]) + 1j * op.mesh.points[:, 1]
    B = op.boundary
    for k in range(S.K):
        form = np.conj(v) @ (op.H @ S.phi[:, k]) - S.lambdas[k] * (np.conj(v) @ (op.M @ S.phi[:, k]))
        bdry = np.sum(op.bmass * np.conj(v[B]) * S.psi[:, k])
        assert abs(form - bdry) < 1e-6 * (1 + S.lambdas[k])


def test_mesh_convergence_rate(euclid):
    err = [abs(dirichlet_eigs(assemble(DiskMesh(1.0, h), euclid), 4).lambdas[0] - J01) for h in (0.1, 0.05)]
    assert 1.7 <= np.log2(err[0] / err[1]) <= 2.3


def test_resolution_guard(coarse_mesh, euclid):
    with pytest.raises(ValueError, match="guard"):
        dirichlet_eigs(assemble(coarse_mesh, euclid), 5000)


def test_delta_zero_and_shift(mesh, euclid, flat):
    _, S = flat
    assert delta(S, S) == 0
    S2 = dirichlet_eigs(assemble(mesh, euclid, q=np.full(mesh.n, 0.3)), 64)
    w = WeightedSeqNorm().weights(64)
    val, parts = delta(S, S2, return_parts=True)
    assert parts["eig_part"] == pytest.approx(0.3 * w.sum(), rel=1e-7)
    assert parts["trace_part"] < 1e-6 * parts["eig_part"]


def test_gauge_invariance_of_data(gauge_pair):
    op1, op2, _ = gauge_pair
    S1, S2 = dirichlet_eigs(op1, 64), dirichlet_eigs(op2, 64)
    assert np.max(np.abs(S1.lambdas - S2.lambdas) / S1.lambdas) < 1e-6
    assert delta(S1, S2) < 1e-5


def test_weight_exponent_range():
    with pytest.raises(ValueError):
        WeightedSeqNorm(m=1.5)


def test_json_fields(flat, tmp_path):
    import json
    _, S = flat
    doc = json.loads(S.to_json(tmp_path / "s.json"))
    assert set(doc) == {"lambdas", "shift", "K", "mesh_id", "trace_fourier_coeffs"}
    assert doc["K"] == 64


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_half_norm_dominates_l2(seed):
    r = np.random.default_rng(seed)
    nb = 64
    bm = np.full(nb, 2 * np.pi / nb)
    f = r.normal(size=nb) + 1j * r.normal(size=nb)
    assert boundary_norm(f, bm, 0.0) <= boundary_norm(f, bm, 0.5) * (1 + 1e-12)
    assert boundary_norm(f, bm, 0.0) == pytest.approx(np.sqrt(np.sum(bm * np.abs(f) ** 2)), rel=1e-12)
