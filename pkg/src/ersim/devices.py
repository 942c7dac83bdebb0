"""Nonlinear device models and the per-state linearization they produce.

Sign conventions follow the circuit DAE ``dq/dt + f(x) = B u``: ``f`` holds
static currents leaving each node.  The step-frozen nonlinear remainder is
``F(x) = G_k x - f(x)``, so that ``-G_k x + F(x) + B u == B u - f(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation
from .sparse_core import from_triplets

EXP_LIMIT = 80.0
_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Diode:
    name: str
    anode: int
    cathode: int
    Is: float = 1e-14
    Vt: float = 0.02585
    C0: float = 0.0
    TT: float = 0.0

    def __post_init__(self):
        if self.Is <= 0 or self.Vt <= 0:
            raise ContractViolation(f"{self.name}: IS and VT must be positive")
        if self.C0 < 0 or self.TT < 0:
            raise ContractViolation(f"{self.name}: CJ0 and TT must be nonnegative")

    def dc_terminals(self) -> tuple[int, int]:
        return (self.anode, self.cathode)

    def current(self, v: float) -> tuple[float, float]:
        """Shockley current and conductance, linearly extended past v/Vt = 80."""
        a = v / self.Vt
        if a > EXP_LIMIT:
            e = math.exp(EXP_LIMIT)
            return self.Is * (e * (1.0 + a - EXP_LIMIT) - 1.0), self.Is * e / self.Vt
        e = math.exp(a)
        return self.Is * (e - 1.0), self.Is * e / self.Vt

    def charge(self, v: float) -> tuple[float, float]:
        i, g = self.current(v)
        return self.C0 * v + self.TT * i, self.C0 + self.TT * g

    @property
    def vcrit(self) -> float:
        return self.Vt * math.log(self.Vt / (_SQRT2 * self.Is))

    def limit(self, vnew: float, vold: float) -> float:
        """pnjlim: keep junction-voltage updates within a thermal-voltage decade."""
        vt = self.Vt
        if vnew > self.vcrit and abs(vnew - vold) > 2.0 * vt:
            if vold > 0:
                arg = 1.0 + (vnew - vold) / vt
                return vold + vt * math.log(arg) if arg > 0 else self.vcrit
            return vt * math.log(vnew / vt)
        return vnew


@dataclass(frozen=True)
class Mosfet1:
    """Level-1 square-law MOSFET without body effect.

    ``polarity`` is +1 for NMOS and -1 for PMOS; VTH is the threshold
    magnitude in both cases.
    """

    name: str
    drain: int
    gate: int
    source: int
    bulk: int
    polarity: int = 1
    vth: float = 0.7
    kp: float = 2e-5
    lam: float = 0.0
    w: float = 1e-6
    l: float = 1e-6
    cgs: float = 0.0
    cgd: float = 0.0

    def __post_init__(self):
        if self.kp <= 0 or self.w <= 0 or self.l <= 0:
            raise ContractViolation(f"{self.name}: KP, W and L must be positive")
        if self.vth < 0 or self.lam < 0 or self.cgs < 0 or self.cgd < 0:
            raise ContractViolation(f"{self.name}: VTH, LAMBDA, CGS, CGD must be nonnegative")

    @property
    def beta(self) -> float:
        return self.kp * self.w / self.l

    def dc_terminals(self) -> tuple[int, int]:
        return (self.drain, self.source)

    def _forward(self, vgs: float, vds: float) -> tuple[float, float, float]:
        """Drain current and (gm, gds) for vds >= 0 in the n-type frame."""
        vov = vgs - self.vth
        if vov <= 0:
            return 0.0, 0.0, 0.0
        k = self.beta
        clm = 1.0 + self.lam * vds
        if vds < vov:
            core = vov * vds - 0.5 * vds * vds
            return k * core * clm, k * vds * clm, k * (vov - vds) * clm + k * core * self.lam
        core = 0.5 * vov * vov
        return k * core * clm, k * vov * clm, k * core * self.lam

    def ids(self, vgs: float, vds: float) -> tuple[float, float, float]:
        """Current into the drain and its derivatives w.r.t. vgs and vds (n-type frame)."""
        if vds >= 0:
            return self._forward(vgs, vds)
        # source and drain swap roles
        i, gm, gds = self._forward(vgs - vds, -vds)
        return -i, -gm, gm + gds

    def terminal_current(self, vd: float, vg: float, vs: float) -> tuple[float, float, float, float]:
        """Drain current (d -> s) and its partials w.r.t. (vd, vg, vs)."""
        p = self.polarity
        i, gm, gds = self.ids(p * (vg - vs), p * (vd - vs))
        return p * i, gds, gm, -(gm + gds)


def make_device(card, idx):
    """Build a device model from a parsed card; ``idx`` maps node names to rows."""
    if card.kind == "D":
        return Diode(
            card.name,
            idx(card.nodes[0]),
            idx(card.nodes[1]),
            Is=card.param("is", 1e-14),
            Vt=card.param("vt", 0.02585),
            C0=card.param("cj0", 0.0),
            TT=card.param("tt", 0.0),
        )
    d, g, s, b = (idx(nd) for nd in card.nodes)
    return Mosfet1(
        card.name, d, g, s, b,
        polarity=-1 if card.model == "pmos" else 1,
        vth=card.param("vth", 0.7),
        kp=card.param("kp", 2e-5),
        lam=card.param("lambda", 0.0),
        w=card.param("w", 1e-6),
        l=card.param("l", 1e-6),
        cgs=card.param("cgs", 0.0),
        cgd=card.param("cgd", 0.0),
    )


def _v(x: np.ndarray, i: int) -> float:
    return float(x[i]) if i >= 0 else 0.0


class _Stamper:
    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []

    def add(self, i: int, j: int, v: float):
        if i >= 0 and j >= 0 and v != 0.0:
            self.rows.append(i)
            self.cols.append(j)
            self.vals.append(v)

    def two_terminal(self, a: int, b: int, g: float):
        self.add(a, a, g)
        self.add(b, b, g)
        self.add(a, b, -g)
        self.add(b, a, -g)

    def matrix(self, n: int) -> sp.csr_matrix:
        return from_triplets(self.rows, self.cols, self.vals, (n, n))


def _add_current(vec: np.ndarray, i: int, val: float):
    if i >= 0:
        vec[i] += val


def device_currents(sys, x: np.ndarray) -> np.ndarray:
    """Sum of nonlinear device currents leaving each row, no limiting."""
    out = np.zeros(sys.n)
    for dev in sys.nonlinear_devices:
        if isinstance(dev, Diode):
            i, _ = dev.current(_v(x, dev.anode) - _v(x, dev.cathode))
            _add_current(out, dev.anode, i)
            _add_current(out, dev.cathode, -i)
        else:
            i, *_ = dev.terminal_current(_v(x, dev.drain), _v(x, dev.gate), _v(x, dev.source))
            _add_current(out, dev.drain, i)
            _add_current(out, dev.source, -i)
    return out


def static_current(sys, x: np.ndarray) -> np.ndarray:
    """f(x): linear plus nonlinear static currents."""
    return sys.G_lin @ x + device_currents(sys, x)


def charge(sys, x: np.ndarray) -> np.ndarray:
    """q(x): linear plus device charges."""
    q = sys.C_lin @ x
    for dev in sys.nonlinear_devices:
        if isinstance(dev, Diode):
            qd, _ = dev.charge(_v(x, dev.anode) - _v(x, dev.cathode))
            _add_current(q, dev.anode, qd)
            _add_current(q, dev.cathode, -qd)
        else:
            vg = _v(x, dev.gate)
            for other, c in ((dev.source, dev.cgs), (dev.drain, dev.cgd)):
                qc = c * (vg - _v(x, other))
                _add_current(q, dev.gate, qc)
                _add_current(q, other, -qc)
    return q


@dataclass(frozen=True, eq=False)
class Linearization:
    C_k: sp.csr_matrix
    G_k: sp.csr_matrix
    f_at_x: np.ndarray
    x_ref: np.ndarray
    system: object


def _check_state(sys, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sys.n,):
        raise ContractViolation(f"state has shape {x.shape}, system has {sys.n} unknowns")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("state vector has non-finite entries")
    return x


def _device_stamps(sys, x: np.ndarray, limit_from: np.ndarray | None):
    """Nonlinear conductance and capacitance stamps plus device currents at ``x``."""
    gs, cs = _Stamper(), _Stamper()
    f = np.zeros(sys.n)
    for dev in sys.nonlinear_devices:
        if isinstance(dev, Diode):
            a, k = dev.anode, dev.cathode
            v = _v(x, a) - _v(x, k)
            vl = v
            if limit_from is not None:
                vl = dev.limit(v, _v(limit_from, a) - _v(limit_from, k))
            i, g = dev.current(vl)
            i += g * (v - vl)
            gs.two_terminal(a, k, g)
            _add_current(f, a, i)
            _add_current(f, k, -i)
            _, c = dev.charge(vl)
            cs.two_terminal(a, k, c)
        else:
            d, g_, s = dev.drain, dev.gate, dev.source
            i, dd, dg, ds = dev.terminal_current(_v(x, d), _v(x, g_), _v(x, s))
            for row, sign in ((d, 1.0), (s, -1.0)):
                gs.add(row, d, sign * dd)
                gs.add(row, g_, sign * dg)
                gs.add(row, s, sign * ds)
            _add_current(f, d, i)
            _add_current(f, s, -i)
            cs.two_terminal(g_, s, dev.cgs)
            cs.two_terminal(g_, d, dev.cgd)
    return gs, cs, f


def _assemble(n: int, parts) -> sp.csr_matrix:
    """Sum of scaled triplet sets ``(scale, (rows, cols, vals))`` as one canonical CSR matrix."""
    rows = np.concatenate([np.asarray(t[0], dtype=np.int64) for _, t in parts])
    cols = np.concatenate([np.asarray(t[1], dtype=np.int64) for _, t in parts])
    vals = np.concatenate([scale * np.asarray(t[2], dtype=np.float64) for scale, t in parts])
    return from_triplets(rows, cols, vals, (n, n))


def evaluate(sys, x, limit_from=None) -> Linearization:
    """Linearize all devices at ``x``.

    With ``limit_from`` the diode junction voltages are limited against the
    previous iterate (Newton use); ``f_at_x`` is then the companion-model
    current at ``x``, i.e. the tangent at the limited voltage.
    """
    x = _check_state(sys, x)
    if limit_from is not None:
        limit_from = _check_state(sys, limit_from)
    f = sys.G_lin @ x
    if not sys.nonlinear_devices:
        return Linearization(sys.C_lin, sys.G_lin, f, x.copy(), sys)
    gs, cs, fd = _device_stamps(sys, x, limit_from)
    g_lin, c_lin = sys.linear_triplets
    G_k = _assemble(sys.n, [(1.0, g_lin), (1.0, (gs.rows, gs.cols, gs.vals))])
    C_k = _assemble(sys.n, [(1.0, c_lin), (1.0, (cs.rows, cs.cols, cs.vals))])
    return Linearization(C_k, G_k, f + fd, x.copy(), sys)


def newton_jacobian(sys, x, h: float, limit_from=None, g_scale: float = 1.0):
    """Backward-Euler Newton data at ``x``: (C/h + g_scale*G, f(x) companion value).

    Equivalent to ``evaluate`` followed by ``C_k / h + G_k`` but assembled in
    one pass, which matters when it is repeated every Newton iteration.
    """
    x = _check_state(sys, x)
    if limit_from is not None:
        limit_from = _check_state(sys, limit_from)
    gs, cs, fd = _device_stamps(sys, x, limit_from)
    g_lin, c_lin = sys.linear_triplets
    J = _assemble(sys.n, [
        (g_scale, g_lin), (g_scale, (gs.rows, gs.cols, gs.vals)),
        (1.0 / h, c_lin), (1.0 / h, (cs.rows, cs.cols, cs.vals)),
    ])
    return J, sys.G_lin @ x + fd


def residual_F(lin: Linearization, x) -> np.ndarray:
    """F(x) = G_k x - f(x) with G_k frozen at ``lin.x_ref``."""
    x = _check_state(lin.system, x)
    if not lin.system.nonlinear_devices:
        return np.zeros_like(x)
    return lin.G_k @ x - static_current(lin.system, x)
