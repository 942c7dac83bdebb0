import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import dense_mevp, phi_scalar, stable_pair
from ersim.errors import ContractViolation, NoConvergence, SingularMatrix, SingularReducedMatrix, ZeroStartVector
from ersim.krylov import (
    MevpConfig,
    eval_at_scaled_h,
    factor_for_standard,
    mevp_iks,
    mevp_residual,
    mevp_state_residual,
    mevp_standard,
    phi1_apply,
    phi2_apply,
)
from ersim.sparse_core import lu_factor

EPS = 1e-7


def diag_system():
    C = sp.identity(3, format="csr")
    G = sp.diags([1.0, 2.0, 3.0], format="csr")
    return C, G


def rc_pair(seed=0, n=20, singular_rows=0):
    rng = np.random.default_rng(seed)
    C, G = stable_pair(rng, n, singular_rows)
    v = rng.standard_normal(n)
    return C, G, v


def arnoldi_relation_residual(basis, G_fact, C):
    m = basis.m
    V = basis.V
    JinvV = np.column_stack([-G_fact.solve(C @ V[:, j]) for j in range(m)])
    R = JinvV - V[:, :m] @ basis.H
    R[:, m - 1] -= basis.h_next * V[:, m]
    return np.linalg.norm(R), np.linalg.norm(basis.H)


# ---------------------------------------------------------------- mevp_iks


def test_invariant_start_breaks_down_at_once():
    C, G = diag_system()
    h = 0.7
    out, basis = mevp_iks(lu_factor(G), C, np.array([1.0, 0, 0]), MevpConfig(), h)
    assert basis.m == 1 and basis.breakdown
    np.testing.assert_allclose(out, [math.exp(-h), 0, 0], rtol=1e-14, atol=1e-300)


def test_zero_step_returns_start():
    C, G, v = rc_pair(1)
    out, _ = mevp_iks(lu_factor(G), C, v, MevpConfig(), 0.0)
    np.testing.assert_allclose(out, v, rtol=1e-12, atol=1e-12 * np.linalg.norm(v))


def test_random_rc_pair_matches_dense_oracle():
    C, G, v = rc_pair(2)
    h = 1e-9
    out, basis = mevp_iks(lu_factor(G), C, v, MevpConfig(eps=EPS), h)
    assert np.linalg.norm(out - dense_mevp(C, G, v, h)) <= 10 * EPS * np.linalg.norm(v)
    assert basis.residual < EPS


def test_singular_capacitance_matches_reduced_oracle():
    C, G, v = rc_pair(3, n=20, singular_rows=5)
    h = 1e-9
    out, basis = mevp_iks(lu_factor(G), C, v, MevpConfig(eps=EPS), h)
    assert basis.projected
    assert np.linalg.norm(out - dense_mevp(C, G, v, h)) <= 10 * EPS * np.linalg.norm(v)


def test_zero_start_vector():
    C, G = diag_system()
    with pytest.raises(ZeroStartVector):
        mevp_iks(lu_factor(G), C, np.zeros(3), MevpConfig(), 1.0)


def test_no_convergence_reports_residual():
    C, G, v = rc_pair(4)
    with pytest.raises(NoConvergence) as exc:
        mevp_iks(lu_factor(G), C, v, MevpConfig(eps=1e-14, m_max=2), 1e-9)
    assert exc.value.m == 2 and exc.value.residual > 0


def test_ill_conditioned_reduced_matrix_is_refused():
    C, G, v = rc_pair(5)
    with pytest.raises(SingularReducedMatrix):
        mevp_iks(lu_factor(G), C, v, MevpConfig(cond_max=0.5, project="never"), 1e-9)


def test_dimension_mismatch():
    C, G = diag_system()
    with pytest.raises(ContractViolation):
        mevp_iks(lu_factor(G), C, np.ones(2), MevpConfig(), 1.0)


def test_basis_invariants():
    C, G, v = rc_pair(6, n=40)
    Gf = lu_factor(G)
    _, basis = mevp_iks(Gf, C, v, MevpConfig(eps=1e-10), 2e-9)
    V = basis.V
    assert np.linalg.norm(V.T @ V - np.eye(V.shape[1])) <= 1e-10
    r, hn = arnoldi_relation_residual(basis, Gf, C)
    assert r <= 1e-9 * hn


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1e3))
def test_scale_invariance(seed, c):
    C, G, v = rc_pair(seed, n=15)
    Gf = lu_factor(G)
    cfg = MevpConfig(eps=1e-9, relative=True)
    a, _ = mevp_iks(Gf, C, v, cfg, 1e-9)
    b, _ = mevp_iks(Gf, C, c * v, cfg, 1e-9)
    np.testing.assert_allclose(b, c * a, rtol=1e-13, atol=1e-13 * c * np.linalg.norm(a))


# ---------------------------------------------------------------- residual


def test_residual_zero_on_breakdown():
    C, G = diag_system()
    _, basis = mevp_iks(lu_factor(G), C, np.array([0, 1.0, 0]), MevpConfig(), 1.0)
    assert mevp_residual(basis, G, 1.0) == 0.0


def test_residual_one_dimensional_hand_value():
    C, G, v = rc_pair(7)
    # a loose tolerance stops the iteration at m = 1
    _, basis = mevp_iks(lu_factor(G), C, v, MevpConfig(eps=1e6), 0.0)
    assert basis.m == 1
    beta = np.linalg.norm(v)
    expect = abs(beta * basis.Hbar[1, 0] / basis.Hbar[0, 0]) * np.linalg.norm(G @ basis.V[:, 1])
    assert mevp_residual(basis, G, 0.0) == pytest.approx(expect, rel=1e-12)


def test_residual_below_eps_at_convergence():
    C, G, v = rc_pair(8)
    _, basis = mevp_iks(lu_factor(G), C, v, MevpConfig(eps=EPS), 1e-9)
    assert mevp_residual(basis, G, 1e-9) < EPS


# ---------------------------------------------------------------- basis reuse


def test_scaled_h_identity_cases():
    C, G, v = rc_pair(9)
    out, basis = mevp_iks(lu_factor(G), C, v, MevpConfig(eps=EPS), 1e-9)
    assert np.array_equal(eval_at_scaled_h(basis, 1e-9), out)
    np.testing.assert_allclose(eval_at_scaled_h(basis, 0.0), v, atol=1e-12 * np.linalg.norm(v))


def test_scaled_h_matches_fresh_run():
    C, G, v = rc_pair(10)
    Gf = lu_factor(G)
    # both sides are only as close as the fresh run is accurate, so use a tight tolerance
    cfg = MevpConfig(eps=1e-12)
    _, basis = mevp_iks(Gf, C, v, cfg, 1e-9)
    fresh, _ = mevp_iks(Gf, C, v, cfg, 0.5e-9)
    assert np.linalg.norm(eval_at_scaled_h(basis, 0.5e-9) - fresh) <= 1e-10 * np.linalg.norm(v)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
def test_scaled_h_property(seed, alpha):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 41))
    C, G = stable_pair(rng, n)
    v = rng.standard_normal(n)
    Gf = lu_factor(G)
    cfg = MevpConfig(eps=1e-12)
    h = 10 ** rng.uniform(-10, -8)
    _, basis = mevp_iks(Gf, C, v, cfg, h)
    fresh, _ = mevp_iks(Gf, C, v, cfg, alpha * h)
    assert np.linalg.norm(eval_at_scaled_h(basis, alpha * h) - fresh) <= 1e-10 * np.linalg.norm(v)


def test_scaled_h_above_convergence_step_is_refused():
    C, G, v = rc_pair(11)
    _, basis = mevp_iks(lu_factor(G), C, v, MevpConfig(), 1e-9)
    with pytest.raises(ContractViolation):
        eval_at_scaled_h(basis, 2e-9)


# ---------------------------------------------------------------- phi applications


def scalar_system():
    one = sp.csr_matrix([[1.0]])
    return lu_factor(one), one


def test_phi1_scalar():
    Gf, C = scalar_system()
    assert phi1_apply(Gf, C, np.array([2.0]), MevpConfig(), 1.0)[0] == pytest.approx(2 * 0.63212056, abs=1e-8)


def test_phi2_scalar():
    Gf, C = scalar_system()
    assert phi2_apply(Gf, C, np.array([2.0]), MevpConfig(), 1.0)[0] == pytest.approx(2 * 0.36787944, abs=1e-8)


def test_phi_zero_vector():
    Gf, C = scalar_system()
    assert phi1_apply(Gf, C, np.zeros(1), MevpConfig(), 1.0).tolist() == [0.0]
    assert phi2_apply(Gf, C, np.zeros(1), MevpConfig(), 1.0).tolist() == [0.0]


def test_phi_small_step_limits():
    C, G, v = rc_pair(12)
    Gf = lu_factor(G)
    h = 1e-15 * 1e-9
    assert np.linalg.norm(phi1_apply(Gf, C, v, MevpConfig(), h) - v) <= 1e-6 * np.linalg.norm(v)
    assert np.linalg.norm(phi2_apply(Gf, C, v, MevpConfig(), h) - v / 2) <= 1e-6 * np.linalg.norm(v)


@pytest.mark.parametrize("k", [1, 2])
def test_phi_matches_dense_oracle(k):
    C, G, v = rc_pair(13)
    h = 1e-9
    Gf = lu_factor(G)
    fn = phi1_apply if k == 1 else phi2_apply
    out = fn(Gf, C, v, MevpConfig(eps=1e-10), h)
    J = -np.linalg.solve(C.toarray(), G.toarray())
    w, X = np.linalg.eig(h * J)
    ref = (X @ np.diag([phi_scalar(k, z.real) for z in w]) @ np.linalg.inv(X) @ v).real
    assert np.linalg.norm(out - ref) <= 1e-6 * np.linalg.norm(v)


# ---------------------------------------------------------------- standard Krylov


def test_standard_invariant_start():
    C, G = diag_system()
    h = 0.3
    out, basis = mevp_standard(factor_for_standard(C), G, np.array([0, 1.0, 0]), MevpConfig(), h)
    assert basis.m == 1
    np.testing.assert_allclose(out, [0, math.exp(-2 * h), 0], rtol=1e-14, atol=1e-300)


def test_standard_agrees_with_invert_krylov():
    C, G, v = rc_pair(14)
    h = 1e-10
    cfg = MevpConfig(eps=EPS)
    a, _ = mevp_iks(lu_factor(G), C, v, cfg, h)
    b, _ = mevp_standard(factor_for_standard(C), G, v, cfg, h)
    ref = dense_mevp(C, G, v, h)
    assert np.linalg.norm(a - b) <= 2 * EPS * np.linalg.norm(v)
    assert np.linalg.norm(b - ref) <= 10 * EPS * np.linalg.norm(v)


def test_standard_needs_nonsingular_capacitance():
    C, _, _ = rc_pair(15, singular_rows=4)
    with pytest.raises(SingularMatrix):
        factor_for_standard(C)


# ---------------------------------------------------------------- state-space residual guard


def test_state_tol_tightens_weakly_conducting_pairs():
    # microsiemens conductances: a 1e-7 A KCL residual alone allows ~0.1 V of error
    rng = np.random.default_rng(17)
    C, G = stable_pair(rng, 30, 0, scale_c=1e-12, scale_g=1e-6)
    v = rng.standard_normal(30)
    h = 1e-7
    ref = dense_mevp(C, G, v, h)
    G_fact = lu_factor(G)
    loose, b_loose = mevp_iks(G_fact, C, v, MevpConfig(eps=EPS), h)
    tight, b_tight = mevp_iks(G_fact, C, v, MevpConfig(eps=EPS, state_tol=1e-8), h)
    assert b_tight.m > b_loose.m
    assert mevp_state_residual(b_tight, h) <= 1e-8
    assert mevp_residual(b_tight, G, h) < EPS
    assert np.linalg.norm(tight - ref) < 1e-6 < np.linalg.norm(loose - ref)


def test_state_tol_is_ignored_in_relative_mode():
    C, G, v = rc_pair(3)
    a = mevp_iks(lu_factor(G), C, v, MevpConfig(relative=True), 1e-9)[1]
    b = mevp_iks(lu_factor(G), C, v, MevpConfig(relative=True, state_tol=1e-30), 1e-9)[1]
    assert a.m == b.m


def test_state_tol_must_be_positive():
    with pytest.raises(ContractViolation):
        MevpConfig(state_tol=0.0)
