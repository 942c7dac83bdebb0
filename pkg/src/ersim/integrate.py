"""DC operating point and transient integration (BENR baseline, ER and ER-C).

The exponential Rosenbrock-Euler step freezes ``C_k``, ``G_k`` at ``x_k`` and
advances

    x_{k+1} = x_k + (exp(hJ) - I)(v1 + v2) + G^{-1} B du

with ``v1 = x_k - G^{-1}(F_k + B u_k)`` and ``v2 = G^{-1} C G^{-1} B du / h``.
Both start vectors are independent of ``h`` inside one PWL source segment,
so a rejected step is retried from the cached Krylov basis without any new
factorization.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .devices import Linearization, charge, evaluate, newton_jacobian, residual_F
from .errors import (
    ContractViolation,
    FloatingNode,
    NoConvergence,
    NoDcConvergence,
    SingularMatrix,
    SingularReducedMatrix,
    StepFailure,
)
from .krylov import KrylovBasis, MevpConfig, eval_at_scaled_h, mevp_iks, mevp_residual, mevp_state_residual
from .netlist import MnaSystem, eval_sources, source_breakpoints
from .sparse_core import Factorization, factorization_count, lu_factor, lu_solve

log = logging.getLogger(__name__)

METHODS = ("BENR", "ER", "ERC")


@dataclass
class StepControl:
    err_budget: float = 1e-4
    alpha: float = 0.5
    beta: float = 2.0
    grow_threshold: int = 5
    grow_policy: str = "no-reject"  # "no-reject": grow only when i == 0; "threshold": i < grow_threshold
    eps: float = 1e-7
    # the solution MEVP must also bring ||G^{-1} r|| below this fraction of
    # err_budget; None leaves the KCL test alone
    state_tol_frac: float | None = 0.1
    m_max: int = 100
    max_rejects: int = 40
    hmin: float | None = None
    hmax: float | None = None
    reltol: float = 1e-3
    abstol: float = 1e-6
    nr_max_iter: int = 50
    spice_jacobian: bool = False
    check_stride: int = 1
    krylov_trace: Callable | None = None

    def __post_init__(self):
        if not 0 < self.alpha < 1 < self.beta:
            raise ContractViolation("step control needs 0 < alpha < 1 < beta")
        if self.err_budget <= 0:
            raise ContractViolation("error budget must be positive")
        if self.state_tol_frac is not None and not self.state_tol_frac > 0:
            raise ContractViolation("state_tol_frac must be positive")
        if self.grow_policy not in ("no-reject", "threshold"):
            raise ContractViolation(f"unknown grow policy {self.grow_policy!r}")

    @classmethod
    def from_system(cls, sys: MnaSystem, **overrides) -> "StepControl":
        opts = sys.options
        kw = dict(
            err_budget=float(opts.get("errbudget")),
            eps=float(opts.get("kryeps")),
            m_max=int(opts.get("mmax")),
            hmin=opts.get("hmin"),
            hmax=opts.get("hmax"),
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @property
    def state_tol(self) -> float | None:
        return None if self.state_tol_frac is None else self.state_tol_frac * self.err_budget

    def mevp_config(self, relative: bool = False) -> MevpConfig:
        return MevpConfig(eps=self.eps, m_max=self.m_max, check_stride=self.check_stride, trace=self.krylov_trace,
                          relative=relative, state_tol=None if relative else self.state_tol)


@dataclass
class SimState:
    t: float
    x: np.ndarray
    h: float
    k: int = 0


@dataclass
class StepRecord:
    t: float
    h_accepted: float
    lu_count: int
    krylov_dims: list[int] = field(default_factory=list)
    nr_iters: int = 0
    rejects: int = 0
    err_norm: float = 0.0
    method: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class ErrorEstimate:
    e_rr: np.ndarray
    norm_inf: float
    delta_F: np.ndarray
    dims: list[int] = field(default_factory=list)
    w: np.ndarray | None = None
    basis: KrylovBasis | None = None


@dataclass(frozen=True)
class CorrectionSpec:
    gamma: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractViolation("correction gamma must be nonnegative")


@dataclass
class Waveform:
    labels: list[str]
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)

    def append(self, t: float, x: np.ndarray):
        self.times.append(float(t))
        self.states.append(np.array(x, dtype=np.float64))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.times)

    def matrix(self) -> np.ndarray:
        return np.vstack(self.states)

    def signal(self, label: str) -> np.ndarray:
        return self.matrix()[:, self.labels.index(label.lower())]

    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path, columns: Sequence[str] | None = None) -> None:
        columns = [c.lower() for c in (columns or self.labels)]
        idx = [self.labels.index(c) for c in columns]
        X = self.matrix()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["time", *columns]) + "\n")
            for t, row in zip(self.times, X):
                fh.write(",".join(format(v, ".17g") for v in (t, *row[idx])) + "\n")


@dataclass
class CostSummary:
    steps: int
    lu_total: int
    m_avg: float
    nr_avg: float
    rejects: int


def cost_report(records: Sequence[StepRecord]) -> CostSummary:
    if not records:
        raise ContractViolation("cost_report needs at least one step record")
    dims = [m for r in records for m in r.krylov_dims]
    return CostSummary(
        steps=len(records),
        lu_total=sum(r.lu_count for r in records),
        m_avg=float(np.mean(dims)) if dims else 0.0,
        nr_avg=float(np.mean([r.nr_iters for r in records])),
        rejects=sum(r.rejects for r in records),
    )


# ---------------------------------------------------------------------------
# DC operating point
# ---------------------------------------------------------------------------


def _factor_conductance(sys: MnaSystem, G) -> Factorization:
    try:
        return lu_factor(G)
    except SingularMatrix as e:
        names = list(sys.floating_nodes)
        if not names and 0 <= e.index < sys.n:
            names = [sys.labels()[e.index]]
        raise FloatingNode(names or ["?"], e.index) from None


def _dc_newton(sys: MnaSystem, x: np.ndarray, Bu: np.ndarray, extra_gmin: float, max_iter: int):
    nodes = sys.n_nodes
    x_prev = None
    for _ in range(max_iter):
        lin = evaluate(sys, x, limit_from=x_prev)
        r = lin.f_at_x - Bu
        G = lin.G_k
        if extra_gmin:
            d = np.zeros(sys.n)
            d[:nodes] = extra_gmin
            r = r + d * x
            G = G + _diag(d)
        dx = -lu_solve(_factor_conductance(sys, G), r)
        x_prev, x = x, x + dx
        if not np.all(np.isfinite(x)):
            return x, False
        if sys.is_linear and not extra_gmin:
            return x, True
        if np.max(np.abs(dx)) <= 1e-9 * (1.0 + np.max(np.abs(x))):
            return x, True
    return x, False


def _diag(d: np.ndarray):
    import scipy.sparse as sp

    return sp.diags(d, format="csr")


def dc_solve(sys: MnaSystem, max_iter: int = 200) -> np.ndarray:
    """Operating point: Newton with junction limiting, gmin stepping as fallback."""
    Bu = sys.B @ eval_sources(sys, 0.0)
    x, ok = _dc_newton(sys, np.zeros(sys.n), Bu, 0.0, max_iter)
    if ok:
        return x
    log.info("DC Newton failed, trying gmin stepping")
    x = np.zeros(sys.n)
    for g in 10.0 ** np.arange(-3, -13, -1):
        x, ok = _dc_newton(sys, x, Bu, float(g), max_iter)
        if not ok:
            raise NoDcConvergence(f"DC analysis failed during gmin stepping at gmin={g:.0e}")
    x, ok = _dc_newton(sys, x, Bu, 0.0, max_iter)
    if not ok:
        raise NoDcConvergence("DC analysis did not converge after gmin stepping")
    return x


# ---------------------------------------------------------------------------
# Backward Euler / Newton-Raphson
# ---------------------------------------------------------------------------


class _NewtonFailure(Exception):
    def __init__(self, iters: int):
        self.iters = iters


def be_solve(sys: MnaSystem, x_k: np.ndarray, t_next: float, h: float, ctl: StepControl) -> tuple[np.ndarray, int]:
    """One backward Euler step solved by Newton; returns (x, iterations).

    Each iteration re-evaluates the devices and refactorizes C/h + G.
    """
    q_k = charge(sys, x_k)
    Bu = sys.B @ eval_sources(sys, t_next)
    x = x_k.copy()
    x_prev = None
    for it in range(1, ctl.nr_max_iter + 1):
        jac, f_x = newton_jacobian(sys, x, h, limit_from=x_prev, g_scale=0.5 if ctl.spice_jacobian else 1.0)
        T = (charge(sys, x) - q_k) / h + f_x - Bu
        dx = -lu_solve(_factor_conductance(sys, jac), T)
        x_prev, x = x, x + dx
        if not np.all(np.isfinite(x)):
            raise _NewtonFailure(it)
        if sys.is_linear and not ctl.spice_jacobian:
            return x, it
        if np.max(np.abs(dx)) <= ctl.reltol * np.max(np.abs(x)) + ctl.abstol:
            return x, it
    raise _NewtonFailure(ctl.nr_max_iter)


def benr_step(sys: MnaSystem, state: SimState, ctl: StepControl, fixed: bool = False) -> tuple[np.ndarray, StepRecord]:
    """Advance one accepted BENR step from ``state`` trying ``state.h`` first.

    Local error is controlled by step doubling: one step of h against two of
    h/2; the two-half-step result is kept.  With ``fixed=True`` a single BE
    step of ``state.h`` is taken with no error control.
    """
    h = state.h
    hmin = ctl.hmin or 0.0
    lu0 = factorization_count()
    nr = 0
    rejects = 0
    while True:
        if h < hmin:
            raise StepFailure(state.t, h, "BENR")
        try:
            if fixed:
                x, it = be_solve(sys, state.x, state.t + h, h, ctl)
                nr += it
                return x, StepRecord(state.t + h, h, factorization_count() - lu0, [], nr, rejects, 0.0, "BENR")
            x_full, it1 = be_solve(sys, state.x, state.t + h, h, ctl)
            nr += it1
            x_mid, it2 = be_solve(sys, state.x, state.t + 0.5 * h, 0.5 * h, ctl)
            nr += it2
            x_half, it3 = be_solve(sys, x_mid, state.t + h, 0.5 * h, ctl)
            nr += it3
        except _NewtonFailure as e:
            nr += e.iters
            if fixed:
                raise StepFailure(state.t, h, "Newton did not converge at fixed step") from None
            rejects += 1
            h *= ctl.alpha
            continue
        err = float(np.max(np.abs(x_full - x_half)))
        if err <= ctl.err_budget:
            return x_half, StepRecord(state.t + h, h, factorization_count() - lu0, [], nr, rejects, err, "BENR")
        rejects += 1
        if rejects > ctl.max_rejects:
            raise StepFailure(state.t, h, "too many rejections")
        h *= ctl.alpha


# ---------------------------------------------------------------------------
# Exponential Rosenbrock-Euler
# ---------------------------------------------------------------------------


@dataclass
class ErBases:
    """Per-step Krylov data reused across step-size rejections."""

    x_k: np.ndarray
    t_k: float
    v: np.ndarray
    z: np.ndarray  # G^{-1} B du/dt
    F_k: np.ndarray
    basis: KrylovBasis | None
    h_max: float


def _er_start(sys: MnaSystem, lin: Linearization, G_fact: Factorization, x_k: np.ndarray, t_k: float, h: float):
    u_k = eval_sources(sys, t_k)
    slope = (eval_sources(sys, t_k + h) - u_k) / h if sys.n_inputs else np.zeros(0)
    F_k = residual_F(lin, x_k)
    v = x_k - lu_solve(G_fact, F_k + sys.B @ u_k)
    Bs = sys.B @ slope
    if np.any(Bs):
        z = lu_solve(G_fact, Bs)
        v = v + lu_solve(G_fact, lin.C_k @ z)
    else:
        z = np.zeros(sys.n)
    return v, z, F_k


def er_step(sys: MnaSystem, lin: Linearization, G_fact: Factorization, state: SimState, ctl: StepControl):
    """One ER solution at step ``state.h``; returns (x_next, bases, record)."""
    h = state.h
    v, z, F_k = _er_start(sys, lin, G_fact, state.x, state.t, h)
    basis = None
    dims = []
    if np.any(v):
        m_evp, basis = mevp_iks(G_fact, lin.C_k, v, ctl.mevp_config(), h)
        dims.append(basis.m)
        x_next = state.x + (m_evp - v) + h * z
    else:
        x_next = state.x + h * z
    bases = ErBases(state.x, state.t, v, z, F_k, basis, h)
    return x_next, bases, StepRecord(state.t + h, h, 1, dims, 0, 0, 0.0, "ER")


def er_rescale(bases: ErBases, lin: Linearization, G_fact: Factorization, h_new: float, ctl: StepControl):
    """Solution at a reduced step from the cached basis.

    Falls back to a fresh basis (same factorization) only if the residual
    check fails at ``h_new``.  Returns (x_next, bases, dims).
    """
    dims: list[int] = []
    if bases.basis is None:
        return bases.x_k + h_new * bases.z, bases, dims
    tol = ctl.state_tol
    if mevp_residual(bases.basis, G_fact.matrix, h_new) < ctl.eps and (
            tol is None or mevp_state_residual(bases.basis, h_new) <= tol):
        m_evp = eval_at_scaled_h(bases.basis, h_new)
    else:
        m_evp, basis = mevp_iks(G_fact, lin.C_k, bases.v, ctl.mevp_config(), h_new)
        bases = ErBases(bases.x_k, bases.t_k, bases.v, bases.z, bases.F_k, basis, h_new)
        dims.append(basis.m)
    return bases.x_k + (m_evp - bases.v) + h_new * bases.z, bases, dims


def nonlinear_error(sys: MnaSystem, lin: Linearization, G_fact: Factorization, x_k, x_next,
                    ctl: StepControl, h: float, F_k: np.ndarray | None = None) -> ErrorEstimate:
    """e_rr = -(exp(hJ) - I) G^{-1} dF with dF = F(x_{k+1}) - F(x_k)."""
    if F_k is None:
        F_k = residual_F(lin, x_k)
    dF = residual_F(lin, x_next) - F_k
    if not np.any(dF):
        return ErrorEstimate(np.zeros(sys.n), 0.0, dF)
    w = lu_solve(G_fact, dF)
    m_w, basis = mevp_iks(G_fact, lin.C_k, w, ctl.mevp_config(relative=True), h)
    e = w - m_w
    return ErrorEstimate(e, float(np.max(np.abs(e))), dF, [basis.m], w, basis)


def correction_term(sys: MnaSystem, lin: Linearization, G_fact: Factorization, deltaF, ctl: StepControl,
                    h: float, spec: CorrectionSpec, estimate: ErrorEstimate | None = None) -> tuple[np.ndarray, list[int]]:
    """D = gamma h phi_2(hJ) C^{-1} dF; returns (D, krylov dims of any new MEVP).

    With w = G^{-1} dF we have C^{-1} dF = -J w, and z phi_2(z) = phi_1(z) - 1
    turns D into gamma (w - phi_1(hJ) w).  That form never builds
    u = G^{-1} C w, whose slow-mode components can be many orders of
    magnitude larger than w and would swamp (exp(hJ) u - u) / h with Krylov
    round-off.  phi_1(hJ) w comes from the basis the error estimator already
    built on w when ``estimate`` is given.
    """
    deltaF = np.asarray(deltaF, dtype=np.float64)
    if spec.gamma == 0 or not spec.enabled or not np.any(deltaF):
        return np.zeros(sys.n), []
    dims: list[int] = []
    if estimate is not None and estimate.basis is not None:
        w, basis = estimate.w, estimate.basis
    else:
        w = lu_solve(G_fact, deltaF)
        _, basis = mevp_iks(G_fact, lin.C_k, w, ctl.mevp_config(relative=True), h)
        dims.append(basis.m)
    return spec.gamma * (w - basis.phi_apply(1, h)), dims


# ---------------------------------------------------------------------------
# Transient driver
# ---------------------------------------------------------------------------


def _h_bounds(ctl: StepControl, t_stop: float) -> tuple[float, float]:
    hmax = ctl.hmax if ctl.hmax else t_stop / 20.0
    hmin = ctl.hmin if ctl.hmin else t_stop * 1e-12
    return hmin, hmax


def _next_breakpoint(bps: list[float], t: float, t_stop: float) -> float:
    tol = 1e-12 * max(t_stop, abs(t))
    for b in bps:
        if b > t + tol:
            return b
    return t_stop


def _clamp_step(h: float, t: float, target: float, t_stop: float) -> tuple[float, bool]:
    """Shorten h so the step ends exactly on ``target``; returns (h, lands_on_target)."""
    gap = target - t
    if h >= gap * (1 - 1e-9):
        return gap, True
    return h, False


def transient(
    sys: MnaSystem,
    method: str = "ER",
    ctl: StepControl | None = None,
    t_stop: float | None = None,
    record_nodes: Sequence[str] | None = None,
    *,
    fixed_h: float | None = None,
    h_init: float | None = None,
    correction: CorrectionSpec | None = None,
    x0: np.ndarray | None = None,
) -> tuple[Waveform, list[StepRecord]]:
    """Integrate from the DC solution to ``t_stop``.

    ``method`` is BENR, ER or ERC.  With ``fixed_h`` every step has that size
    (clamped only at source breakpoints and t_stop) and no error control is
    applied.
    """
    method = method.upper()
    if method not in METHODS:
        raise ContractViolation(f"unknown method {method!r}")
    ctl = ctl or StepControl.from_system(sys)
    if t_stop is None:
        if sys.tran is None:
            raise ContractViolation("no stop time given and netlist has no .TRAN")
        t_stop = sys.tran.stop_time
    hmin, hmax = _h_bounds(ctl, t_stop)
    if fixed_h is None:
        ctl = StepControl(**{**ctl.__dict__, "hmin": hmin, "hmax": hmax})
    if method == "ERC" and correction is None:
        correction = CorrectionSpec()

    labels = sys.labels()
    wave = Waveform(labels)
    x = dc_solve(sys) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    t = 0.0
    wave.append(t, x)
    bps = source_breakpoints(sys, 0.0, t_stop)

    if fixed_h is not None:
        h_nom = fixed_h
    elif h_init is not None:
        h_nom = h_init
    else:
        cands = [hmax]
        if sys.tran is not None:
            cands.append(sys.tran.step_hint)
        if bps:
            cands.append(bps[0])
        h_nom = min(cands)
    h_nom = min(h_nom, hmax) if fixed_h is None else h_nom

    records: list[StepRecord] = []
    k = 0
    end_tol = 1e-12 * t_stop
    while t < t_stop - end_tol:
        target = _next_breakpoint(bps, t, t_stop)
        h, on_target = _clamp_step(h_nom, t, target, t_stop)
        state = SimState(t, x, h, k)
        if method == "BENR":
            x_new, rec = benr_step(sys, state, ctl, fixed=fixed_h is not None)
        else:
            x_new, rec = _er_accepted_step(sys, state, ctl, method == "ERC", correction, fixed_h is not None)
        h_acc = rec.h_accepted
        t = target if (on_target and h_acc == h) else t + h_acc
        rec.t = t
        x = x_new
        k += 1
        records.append(rec)
        wave.append(t, x)
        if fixed_h is not None:
            continue
        base = h_nom if rec.rejects == 0 else h_acc
        grow = rec.rejects == 0 if ctl.grow_policy == "no-reject" else rec.rejects < ctl.grow_threshold
        h_nom = min(base * ctl.beta if grow else base, hmax)
        h_nom = max(h_nom, hmin)
    if record_nodes:
        keep = [labels.index(n.lower()) for n in record_nodes]
        wave = Waveform([labels[i] for i in keep], wave.times, [s[keep] for s in wave.states])
    return wave, records


def _er_accepted_step(sys: MnaSystem, state: SimState, ctl: StepControl, corrected: bool,
                      correction: CorrectionSpec | None, fixed: bool) -> tuple[np.ndarray, StepRecord]:
    lu0 = factorization_count()
    lin = evaluate(sys, state.x)
    G_fact = _factor_conductance(sys, lin.G_k)
    h = state.h
    rejects = 0
    while True:
        try:
            x_next, bases, rec = er_step(sys, lin, G_fact, SimState(state.t, state.x, h, state.k), ctl)
            break
        except (NoConvergence, SingularReducedMatrix) as e:
            if fixed:
                raise StepFailure(state.t, h, str(e)) from None
            rejects += 1
            h *= ctl.alpha
            if h < (ctl.hmin or 0.0) or rejects > ctl.max_rejects:
                raise StepFailure(state.t, h, str(e)) from None
    dims = list(rec.krylov_dims)
    while True:
        try:
            est = nonlinear_error(sys, lin, G_fact, state.x, x_next, ctl, h, F_k=bases.F_k)
            step_dims = dims + est.dims
            if corrected and correction is not None and correction.enabled:
                D, cd = correction_term(sys, lin, G_fact, est.delta_F, ctl, h, correction, est)
                x_next = x_next + D
                step_dims += cd
        except (NoConvergence, SingularReducedMatrix) as e:
            if fixed:
                raise StepFailure(state.t, h, str(e)) from None
            est = None
        if fixed or (est is not None and est.norm_inf <= ctl.err_budget):
            return x_next, StepRecord(state.t + h, h, factorization_count() - lu0, step_dims, 0, rejects,
                                      est.norm_inf if est else math.nan, "ERC" if corrected else "ER")
        rejects += 1
        h *= ctl.alpha
        if h < (ctl.hmin or 0.0) or rejects > ctl.max_rejects:
            raise StepFailure(state.t, h, "nonlinear error above budget")
        x_next, bases, extra = er_rescale(bases, lin, G_fact, h, ctl)
        dims = extra
