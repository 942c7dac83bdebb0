"""Matrix-exponential-vector products on the invert Krylov subspace.

For the linear dynamics ``C dx/dt = -G x`` the Jacobian is ``J = -C^{-1} G``.
The invert subspace is built on ``J^{-1} = -G^{-1} C``, so only ``G`` is ever
factorized and ``C`` may be singular.  With an orthonormal basis ``V_m`` and
Hessenberg ``H_m`` satisfying ``J^{-1} V_m = V_m H_m + h_{m+1,m} v_{m+1} e_m^T``
the product is approximated by

    exp(t J) v  ~=  V_m exp(t H_m^{-1}) c,      c = ||v|| e_1.

When ``C`` has empty rows the start vector generally has a component in
``null(C)``; those directions are the algebraic part of the DAE and decay
instantly.  The basis is then started from ``u = J^{-1} v`` instead, which lies
in the dynamic subspace, and the coefficients become ``c = ||u|| H_m^{-1} e_1``
so that ``V_m c`` reproduces the consistent projection of ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, NoConvergence, SingularReducedMatrix, ZeroStartVector
from .sparse_core import Factorization, dense_expm, dense_phi, empty_rows, lu_factor, lu_solve

_REORTH = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class MevpConfig:
    eps: float = 1e-7
    m_max: int = 100
    breakdown_tol: float = 1e-12
    check_stride: int = 1
    cond_max: float = 1e12
    project: str = "auto"  # "auto" | "never" | "always"
    # False: stop when the KCL residual (amperes) is below eps.  True: stop
    # when the G-preconditioned residual is below eps * ||v||, which is
    # scale-free and suits small correction vectors.
    relative: bool = False
    # Optional second test for the absolute mode: the residual mapped back to
    # state units, ||G^{-1} r||, must also be at most state_tol.  A KCL residual
    # in amperes says little about volts on nodes held only by tiny conductances.
    state_tol: float | None = None
    trace: Callable[[int, float, float, float], None] | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ContractViolation("eps must be positive")
        if self.state_tol is not None and not self.state_tol > 0:
            raise ContractViolation("state_tol must be positive")
        if self.m_max < 1:
            raise ContractViolation("m_max must be at least 1")
        if self.check_stride < 1:
            raise ContractViolation("check_stride must be at least 1")
        if self.project not in ("auto", "never", "always"):
            raise ContractViolation(f"unknown projection mode {self.project!r}")


@dataclass(frozen=True, eq=False)
class KrylovBasis:
    V: np.ndarray          # n x (m+1)
    Hbar: np.ndarray       # (m+1) x m
    m: int
    beta: float            # ||v||
    h_sub: float
    coef: np.ndarray       # coefficient vector c of length m
    Hinv: np.ndarray       # H_m^{-1}
    m_evp: np.ndarray      # V_m exp(h_sub H_m^{-1}) c
    residual: float
    projected: bool = False
    breakdown: bool = False
    start_norm: float = math.nan  # norm of the vector the basis was started from

    @property
    def H(self) -> np.ndarray:
        return self.Hbar[: self.m, : self.m]

    @property
    def h_next(self) -> float:
        return float(self.Hbar[self.m, self.m - 1]) if self.m else 0.0

    def evaluate(self, t: float) -> np.ndarray:
        if self.m == 0:
            return np.zeros(self.V.shape[0])
        return self.V[:, : self.m] @ (dense_expm(t * self.Hinv) @ self.coef)

    def phi_coefficients(self, k: int, t: float) -> np.ndarray:
        """Reduced vector H^{-k} phi_k(t H^{-1}) c."""
        if self.m == 0:
            return np.zeros(0)
        y = dense_phi(k, t * self.Hinv) @ self.coef
        for _ in range(k):
            y = self.Hinv @ y
        return y

    def phi_apply(self, k: int, t: float) -> np.ndarray:
        """phi_k(tJ) applied to the start vector, read from the basis as V phi_k(t H^{-1}) c."""
        if self.m == 0:
            return np.zeros(self.V.shape[0])
        return self.V[:, : self.m] @ (dense_phi(k, t * self.Hinv) @ self.coef)

    def delta_over_h(self, t: float) -> np.ndarray:
        """(exp(tJ) - I) v / t evaluated inside the basis without cancellation."""
        if self.m == 0:
            return np.zeros(self.V.shape[0])
        return self.V[:, : self.m] @ self.phi_coefficients(1, t)


def _invert_reduced(H: np.ndarray, cond_max: float) -> np.ndarray:
    """Explicit inverse of the small Hessenberg matrix with a 1-norm condition check."""
    with np.errstate(all="ignore"):
        try:
            Hinv = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            raise SingularReducedMatrix("reduced Hessenberg matrix is exactly singular") from None
    c = float(np.abs(H).sum(axis=0).max() * np.abs(Hinv).sum(axis=0).max())
    if not np.isfinite(c) or c > cond_max:
        raise SingularReducedMatrix(f"reduced Hessenberg matrix is singular (cond = {c:.3g})")
    return Hinv


def _coefficients(Hinv: np.ndarray, scale: float, projected: bool) -> np.ndarray:
    m = Hinv.shape[0]
    if projected:
        return scale * Hinv[:, 0].copy()
    c = np.zeros(m)
    c[0] = scale
    return c


def _residual_norm(h_next: float, Hinv: np.ndarray, coef: np.ndarray, G_v_next_norm: float,
                   t: float, scale: float, projected: bool) -> float:
    if h_next == 0.0:
        return 0.0
    # spurious large eigenvalues of H^{-1} can overflow the exponential;
    # the resulting nan simply fails the convergence test
    with np.errstate(over="ignore", invalid="ignore"):
        s = Hinv[-1, :] @ (dense_expm(t * Hinv) @ coef)
    r = abs(h_next * s) * G_v_next_norm
    if projected:
        # consistency of the initial value V_m c with the projected start vector
        r = max(r, abs(h_next * scale * Hinv[-1, 0]) * G_v_next_norm)
    return float(r)


def _arnoldi(apply_op, G: sp.csr_matrix, start: np.ndarray, scale: float, cfg: MevpConfig,
             h: float, projected: bool, ref_norm: float) -> KrylovBasis:
    n = start.shape[0]
    m_cap = cfg.m_max
    V = np.zeros((n, m_cap + 1))
    Hbar = np.zeros((m_cap + 1, m_cap))
    V[:, 0] = start / np.linalg.norm(start)
    last_res = math.inf
    for j in range(m_cap):
        w = apply_op(V[:, j])
        pre = float(np.linalg.norm(w))
        for i in range(j + 1):
            Hbar[i, j] = w @ V[:, i]
            w -= Hbar[i, j] * V[:, i]
        post = float(np.linalg.norm(w))
        if post < _REORTH * pre:
            for i in range(j + 1):
                corr = w @ V[:, i]
                Hbar[i, j] += corr
                w -= corr * V[:, i]
            post = float(np.linalg.norm(w))
        m = j + 1
        # Scale by the largest Hessenberg entry as well: once the invariant
        # subspace is exhausted the leftover is round-off of size eps*|K|,
        # which can exceed breakdown_tol times a small pre-norm.
        h_scale = max(pre, float(np.max(np.abs(Hbar[: j + 1, : j + 1]))))
        breakdown = post <= cfg.breakdown_tol * h_scale or post == 0.0
        if breakdown:
            Hbar[m, j] = 0.0
        else:
            Hbar[m, j] = post
            V[:, m] = w / post
        if not (breakdown or m % cfg.check_stride == 0 or m == m_cap):
            continue
        Hinv = _invert_reduced(Hbar[:m, :m], cfg.cond_max)
        coef = _coefficients(Hinv, scale, projected)
        if breakdown:
            res = 0.0
        else:
            g_norm = 1.0 / ref_norm if cfg.relative else float(np.linalg.norm(G @ V[:, m]))
            res = _residual_norm(Hbar[m, j], Hinv, coef, g_norm, h, scale, projected)
        if cfg.trace is not None:
            cfg.trace(m, h, res, float(Hbar[m, j]))
        last_res = res
        converged = res < cfg.eps
        if converged and not breakdown and cfg.state_tol is not None and not cfg.relative:
            converged = _residual_norm(Hbar[m, j], Hinv, coef, 1.0, h, scale, projected) <= cfg.state_tol
        if breakdown or converged:
            Vm = V[:, : m + 1].copy()
            m_evp = Vm[:, :m] @ (dense_expm(h * Hinv) @ coef)
            return KrylovBasis(
                V=Vm,
                Hbar=Hbar[: m + 1, :m].copy(),
                m=m,
                beta=float(np.linalg.norm(start)) if not projected else math.nan,
                h_sub=h,
                coef=coef,
                Hinv=Hinv,
                m_evp=m_evp,
                residual=res,
                projected=projected,
                breakdown=breakdown,
                start_norm=scale,
            )
    raise NoConvergence(last_res, m_cap)


def needs_projection(C: sp.csr_matrix) -> bool:
    return empty_rows(C).size > 0


def mevp_iks(G_fact: Factorization, C: sp.csr_matrix, v, cfg: MevpConfig = MevpConfig(), h: float = 0.0):
    """Approximate exp(h J) v with J = -C^{-1} G on the invert Krylov subspace.

    Returns ``(m_evp, basis)``.  Raises ZeroStartVector for v = 0,
    NoConvergence when ``cfg.m_max`` is reached and SingularReducedMatrix when
    H_m cannot be inverted reliably.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (G_fact.n,) or C.shape != (G_fact.n, G_fact.n):
        raise ContractViolation("mevp_iks: dimension mismatch between G, C and v")
    if h < 0:
        raise ContractViolation("mevp_iks needs h >= 0")
    beta = float(np.linalg.norm(v))
    if beta == 0.0:
        raise ZeroStartVector("MEVP start vector is zero")
    G = G_fact.matrix

    def apply_op(y):
        return -lu_solve(G_fact, C @ y)

    projected = cfg.project == "always" or (cfg.project == "auto" and needs_projection(C))
    if not projected:
        try:
            basis = _arnoldi(apply_op, G, v, beta, cfg, h, projected=False, ref_norm=beta)
        except SingularReducedMatrix:
            if cfg.project == "never":
                raise
            projected = True
        else:
            return basis.m_evp, _with_beta(basis, beta)
    u = apply_op(v)
    beta_u = float(np.linalg.norm(u))
    if beta_u == 0.0:
        # v lies entirely in the algebraic subspace: exp(hJ) P v = 0
        n = v.shape[0]
        basis = KrylovBasis(np.zeros((n, 1)), np.zeros((1, 0)), 0, beta, h, np.zeros(0), np.zeros((0, 0)),
                            np.zeros(n), 0.0, projected=True, breakdown=True, start_norm=0.0)
        return basis.m_evp, basis
    basis = _arnoldi(apply_op, G, u, beta_u, cfg, h, projected=True, ref_norm=beta)
    return basis.m_evp, _with_beta(basis, beta)


def _with_beta(basis: KrylovBasis, beta: float) -> KrylovBasis:
    return KrylovBasis(**{**basis.__dict__, "beta": beta})


def mevp_residual(basis: KrylovBasis, G: sp.csr_matrix, h: float) -> float:
    """2-norm of the KCL residual C (x_m'(h) - J x_m(h)) of the basis at time h."""
    if basis.m == 0 or basis.breakdown:
        return 0.0
    gv = float(np.linalg.norm(G @ basis.V[:, basis.m]))
    return _residual_norm(basis.h_next, basis.Hinv, basis.coef, gv, h, basis.start_norm, basis.projected)


def mevp_state_residual(basis: KrylovBasis, h: float) -> float:
    """2-norm of G^{-1} r at time h, the residual expressed in state units."""
    if basis.m == 0 or basis.breakdown:
        return 0.0
    return _residual_norm(basis.h_next, basis.Hinv, basis.coef, 1.0, h, basis.start_norm, basis.projected)


def eval_at_scaled_h(basis: KrylovBasis, h_new: float) -> np.ndarray:
    """Reuse a converged basis at a step ``0 <= h_new <= h_sub``; no operator applications."""
    if h_new < 0 or h_new > basis.h_sub:
        raise ContractViolation(f"eval_at_scaled_h: h_new={h_new!r} outside [0, {basis.h_sub!r}]")
    if h_new == basis.h_sub:
        return basis.m_evp.copy()
    return basis.evaluate(h_new)


def phi1_apply(G_fact: Factorization, C: sp.csr_matrix, v, cfg: MevpConfig = MevpConfig(), h: float = 0.0):
    """phi_1(hJ) v = -(1/h) G^{-1} C (m_evp - v), evaluated inside the basis."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    _, basis = mevp_iks(G_fact, C, v, cfg, h)
    return -lu_solve(G_fact, C @ basis.delta_over_h(h))


def phi2_apply(G_fact: Factorization, C: sp.csr_matrix, v, cfg: MevpConfig = MevpConfig(), h: float = 0.0):
    """phi_2(hJ) v = (G^{-1} C)^2 (m_evp - v - hJv) / h^2, evaluated inside the basis."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    _, basis = mevp_iks(G_fact, C, v, cfg, h)
    y = basis.V[:, : basis.m] @ basis.phi_coefficients(2, h)
    for _ in range(2):
        y = lu_solve(G_fact, C @ y)
    return y


def mevp_standard(C_fact: Factorization, G: sp.csr_matrix, v, cfg: MevpConfig = MevpConfig(), h: float = 0.0):
    """exp(hJ) v on the standard Krylov subspace of J = -C^{-1} G (needs C nonsingular).

    Only for comparisons; convergence uses the a-posteriori estimate
    ``beta |h_{m+1,m} e_m^T exp(h H_m) e_1|`` scaled by ||C v_{m+1}||.
    """
    v = np.asarray(v, dtype=np.float64)
    beta = float(np.linalg.norm(v))
    if beta == 0.0:
        raise ZeroStartVector("MEVP start vector is zero")
    n = v.shape[0]
    C = C_fact.matrix
    V = np.zeros((n, cfg.m_max + 1))
    Hbar = np.zeros((cfg.m_max + 1, cfg.m_max))
    V[:, 0] = v / beta
    res = math.inf
    for j in range(cfg.m_max):
        w = -lu_solve(C_fact, G @ V[:, j])
        pre = float(np.linalg.norm(w))
        for _ in range(2):
            for i in range(j + 1):
                c = w @ V[:, i]
                Hbar[i, j] += c
                w -= c * V[:, i]
            if np.linalg.norm(w) >= _REORTH * pre:
                break
        post = float(np.linalg.norm(w))
        m = j + 1
        E = dense_expm(h * Hbar[:m, :m])
        # Scale by the largest Hessenberg entry as well: once the invariant
        # subspace is exhausted the leftover is round-off of size eps*|K|,
        # which can exceed breakdown_tol times a small pre-norm.
        h_scale = max(pre, float(np.max(np.abs(Hbar[: j + 1, : j + 1]))))
        breakdown = post <= cfg.breakdown_tol * h_scale or post == 0.0
        if breakdown:
            res = 0.0
        else:
            Hbar[m, j] = post
            V[:, m] = w / post
            res = beta * abs(post * E[m - 1, 0]) * float(np.linalg.norm(C @ V[:, m]))
        if cfg.trace is not None:
            cfg.trace(m, h, res, float(Hbar[m, j]))
        if breakdown or res < cfg.eps:
            Vm = V[:, : m + 1].copy()
            coef = np.zeros(m)
            coef[0] = beta
            out = Vm[:, :m] @ (E[:, 0] * beta)
            basis = KrylovBasis(Vm, Hbar[: m + 1, :m].copy(), m, beta, h, coef, np.full((m, m), np.nan), out, res,
                                breakdown=breakdown, start_norm=beta)
            return out, basis
    raise NoConvergence(res, cfg.m_max)


def factor_for_standard(C: sp.csr_matrix) -> Factorization:
    """Factor C for mevp_standard; raises SingularMatrix for singular C."""
    return lu_factor(C)
