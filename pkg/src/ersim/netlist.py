"""SPICE-subset netlist parsing and modified nodal analysis assembly.

Grammar (case-insensitive, line oriented)::

    * comment line              (a leading comment becomes the title)
    R<name> n1 n2 value
    C<name> n1 n2 value
    L<name> n1 n2 value
    V<name> n+ n- [DC] value | PWL(t1 v1 t2 v2 ...) | PULSE(v1 v2 td tr tf pw per)
    I<name> n+ n- (same source forms as V)
    D<name> anode cathode [IS=..] [VT=..] [CJ0=..] [TT=..]
    M<name> d g s b MOS1|NMOS|PMOS [VTH=..] [KP=..] [LAMBDA=..] [W=..] [L=..] [CGS=..] [CGD=..]
    .TRAN tstep tstop
    .OPTIONS KEY=value ...
    .END

A ``+`` at the start of a line continues the previous card and ``$`` starts
a trailing comment.  Numbers accept the suffixes f p n u m k meg g t.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ContractViolation, NetlistError
from .sparse_core import from_triplets

GROUND_NAMES = {"0", "gnd"}

OPTION_DEFAULTS = {
    "errbudget": 1e-4,
    "kryeps": 1e-7,
    "gmin": 1e-12,
    "mmax": 100,
    "hmin": None,
    "hmax": None,
}

_SUFFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3, "k": 1e3, "meg": 1e6, "g": 1e9, "t": 1e12}
_NUMBER_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumkgt])?([a-z]*)$")


def parse_value(token: str) -> float:
    """Parse a SPICE number such as ``1k``, ``2.5meg`` or ``10uF``."""
    m = _NUMBER_RE.match(token.strip().lower())
    if not m:
        raise ValueError(f"not a number: {token!r}")
    value = float(m.group(1))
    if m.group(2):
        value *= _SUFFIX[m.group(2)]
    return value


# ---------------------------------------------------------------------------
# Document model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceWaveform:
    kind: str  # "DC" | "PWL" | "PULSE"
    value: float = 0.0
    points: tuple[tuple[float, float], ...] = ()
    pulse: tuple[float, float, float, float, float, float, float] | None = None

    def __post_init__(self):
        if self.kind == "PWL":
            if not self.points:
                raise ValueError("PWL needs at least one breakpoint")
            times = [p[0] for p in self.points]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("PWL breakpoints must be strictly increasing in time")
        if self.kind == "PULSE":
            if self.pulse is None or len(self.pulse) != 7:
                raise ValueError("PULSE needs (v1 v2 td tr tf pw per)")
            _, _, td, tr, tf, pw, per = self.pulse
            if min(td, tr, tf, pw, per) < 0:
                raise ValueError("PULSE times must be nonnegative")
            if per > 0 and tr + pw + tf > per:
                raise ValueError("PULSE period shorter than rise+width+fall")

    def __call__(self, t: float) -> float:
        if self.kind == "DC":
            return self.value
        if self.kind == "PWL":
            return _pwl_eval(self.points, t)
        return _pulse_eval(self.pulse, t)

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        if self.kind == "DC":
            return []
        if self.kind == "PWL":
            return [tp for tp, _ in self.points if t0 < tp < t1]
        v1, v2, td, tr, tf, pw, per = self.pulse
        edges = [0.0, tr, tr + pw, tr + pw + tf]
        out = []
        if per <= 0:
            out = [td + e for e in edges]
        else:
            k = max(0, int(math.floor((t0 - td) / per)))
            while td + k * per < t1:
                out.extend(td + k * per + e for e in edges)
                k += 1
        return sorted({b for b in out if t0 < b < t1})

    def card_text(self) -> str:
        if self.kind == "DC":
            return f"DC {self.value!r}"
        if self.kind == "PWL":
            return "PWL(" + " ".join(f"{t!r} {v!r}" for t, v in self.points) + ")"
        return "PULSE(" + " ".join(repr(p) for p in self.pulse) + ")"


def _pwl_eval(points, t: float) -> float:
    if t <= points[0][0]:
        return points[0][1]
    if t >= points[-1][0]:
        return points[-1][1]
    times = [p[0] for p in points]
    i = int(np.searchsorted(times, t, side="right")) - 1
    (ta, va), (tb, vb) = points[i], points[i + 1]
    return va + (vb - va) * (t - ta) / (tb - ta)


def _pulse_eval(pulse, t: float) -> float:
    v1, v2, td, tr, tf, pw, per = pulse
    s = t - td
    if s < 0:
        return v1
    if per > 0:
        s = math.fmod(s, per)
    if s < tr:
        return v1 + (v2 - v1) * s / tr
    s -= tr
    if s < pw:
        return v2
    s -= pw
    if s < tf:
        return v2 + (v1 - v2) * s / tf
    return v1


@dataclass(frozen=True)
class DeviceCard:
    kind: str  # R C L V I D M
    name: str
    nodes: tuple[str, ...]
    value: float | None = None
    source: SourceWaveform | None = None
    model: str | None = None
    params: tuple[tuple[str, float], ...] = ()

    def param(self, key: str, default: float) -> float:
        return dict(self.params).get(key, default)


@dataclass(frozen=True)
class Tran:
    step_hint: float
    stop_time: float


@dataclass(frozen=True)
class Options:
    values: tuple[tuple[str, float], ...] = ()

    def get(self, key: str):
        return dict(self.values).get(key, OPTION_DEFAULTS.get(key))


@dataclass
class NetlistDoc:
    title: str = ""
    devices: list[DeviceCard] = field(default_factory=list)
    directives: list = field(default_factory=list)

    @property
    def tran(self) -> Tran | None:
        trans = [d for d in self.directives if isinstance(d, Tran)]
        return trans[0] if trans else None

    @property
    def options(self) -> Options:
        merged: dict[str, float] = {}
        for d in self.directives:
            if isinstance(d, Options):
                merged.update(d.values)
        return Options(tuple(merged.items()))

    def nodes(self) -> list[str]:
        seen: dict[str, None] = {}
        for dev in self.devices:
            for nd in dev.nodes:
                if nd not in GROUND_NAMES:
                    seen.setdefault(nd)
        return list(seen)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_N_NODES = {"R": 2, "C": 2, "L": 2, "V": 2, "I": 2, "D": 2, "M": 4}
_DIODE_KEYS = {"is", "vt", "cj0", "tt"}
_MOS_KEYS = {"vth", "kp", "lambda", "w", "l", "cgs", "cgd"}
_MOS_MODELS = {"mos1", "nmos", "pmos"}
_OPTION_KEYS = set(OPTION_DEFAULTS)


def _logical_lines(text: str) -> list[tuple[int, str]]:
    """Join continuation lines and strip comments; returns (first line number, text)."""
    out: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("$", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("*"):
            out.append((lineno, stripped))
            continue
        if stripped.startswith("+"):
            if not out or out[-1][1].startswith("*"):
                raise NetlistError("continuation line without a preceding card", lineno, "+")
            out[-1] = (out[-1][0], out[-1][1] + " " + stripped[1:])
            continue
        out.append((lineno, stripped))
    return out


def _tokenize(line: str) -> list[str]:
    line = re.sub(r"\s*=\s*", "=", line)
    return line.replace("(", " ( ").replace(")", " ) ").replace(",", " ").split()


def _number(tok: str, lineno: int) -> float:
    try:
        return parse_value(tok)
    except ValueError:
        raise NetlistError("expected a number", lineno, tok) from None


def _parse_source(tokens: list[str], lineno: int) -> SourceWaveform:
    if not tokens:
        raise NetlistError("source value missing", lineno)
    head = tokens[0].lower()
    if head in ("pwl", "pulse"):
        if len(tokens) < 2 or tokens[1] != "(" or tokens[-1] != ")":
            raise NetlistError(f"{head.upper()} arguments must be parenthesised", lineno, tokens[-1])
        args = [_number(t, lineno) for t in tokens[2:-1]]
        if head == "pwl":
            if len(args) < 2 or len(args) % 2:
                raise NetlistError("PWL needs time/value pairs", lineno, tokens[0])
            pts = tuple(zip(args[0::2], args[1::2]))
            try:
                return SourceWaveform("PWL", points=pts)
            except ValueError as e:
                raise NetlistError(str(e), lineno, tokens[0]) from None
        if len(args) == 6:
            args.append(0.0)
        if len(args) != 7:
            raise NetlistError("PULSE needs v1 v2 td tr tf pw [per]", lineno, tokens[0])
        try:
            return SourceWaveform("PULSE", pulse=tuple(args))
        except ValueError as e:
            raise NetlistError(str(e), lineno, tokens[0]) from None
    if head == "dc":
        tokens = tokens[1:]
    if len(tokens) != 1:
        raise NetlistError("expected a single DC value", lineno, tokens[-1] if tokens else None)
    return SourceWaveform("DC", value=_number(tokens[0], lineno))


def _parse_params(tokens: list[str], allowed: set[str], lineno: int) -> tuple[tuple[str, float], ...]:
    params = []
    for tok in tokens:
        if "=" not in tok:
            raise NetlistError("expected KEY=value", lineno, tok)
        key, val = tok.split("=", 1)
        key = key.lower()
        if key not in allowed:
            raise NetlistError(f"unknown parameter {key.upper()}", lineno, tok)
        params.append((key, _number(val, lineno)))
    return tuple(params)


def _parse_card(tokens: list[str], lineno: int) -> DeviceCard:
    name = tokens[0].upper()
    kind = name[0]
    if kind not in _N_NODES:
        raise NetlistError(f"unknown device kind {kind!r}", lineno, tokens[0])
    nn = _N_NODES[kind]
    if len(tokens) < 1 + nn:
        raise NetlistError(f"{kind} card needs {nn} nodes", lineno, tokens[-1])
    nodes = tuple(t.lower() for t in tokens[1:1 + nn])
    if any(t in "()" or "=" in t for t in nodes):
        raise NetlistError("malformed node name", lineno, next(t for t in nodes if t in "()" or "=" in t))
    rest = tokens[1 + nn:]
    if kind in "RCL":
        if len(rest) != 1:
            raise NetlistError(f"{kind} card needs exactly one value", lineno, rest[-1] if rest else tokens[-1])
        value = _number(rest[0], lineno)
        if kind == "R" and value == 0:
            raise NetlistError("zero resistance", lineno, rest[0])
        return DeviceCard(kind, name, nodes, value=value)
    if kind in "VI":
        return DeviceCard(kind, name, nodes, source=_parse_source(rest, lineno))
    if kind == "D":
        return DeviceCard(kind, name, nodes, params=_parse_params(rest, _DIODE_KEYS, lineno))
    if not rest or rest[0].lower() not in _MOS_MODELS:
        raise NetlistError("MOSFET card needs a model name (MOS1, NMOS or PMOS)", lineno, rest[0] if rest else tokens[-1])
    model = rest[0].lower()
    if model == "mos1":
        model = "nmos"
    return DeviceCard(kind, name, nodes, model=model, params=_parse_params(rest[1:], _MOS_KEYS, lineno))


def parse_netlist(text: str) -> NetlistDoc:
    doc = NetlistDoc()
    names: set[str] = set()
    first = True
    for lineno, line in _logical_lines(text):
        if line.startswith("*"):
            if first:
                doc.title = line[1:].strip()
            first = False
            continue
        first = False
        tokens = _tokenize(line)
        head = tokens[0].lower()
        if head.startswith("."):
            if head == ".end":
                break
            if head == ".title":
                doc.title = " ".join(tokens[1:])
            elif head == ".tran":
                if len(tokens) != 3:
                    raise NetlistError(".TRAN needs tstep tstop", lineno, tokens[-1])
                step, stop = _number(tokens[1], lineno), _number(tokens[2], lineno)
                if step <= 0 or stop <= 0:
                    raise NetlistError(".TRAN times must be positive", lineno, tokens[1])
                if doc.tran is not None:
                    raise NetlistError("duplicate .TRAN directive", lineno, tokens[0])
                doc.directives.append(Tran(step, stop))
            elif head == ".options" or head == ".option":
                doc.directives.append(Options(_parse_params(tokens[1:], _OPTION_KEYS, lineno)))
            else:
                raise NetlistError("unknown directive", lineno, tokens[0])
            continue
        card = _parse_card(tokens, lineno)
        if card.name in names:
            raise NetlistError(f"duplicate device name {card.name}", lineno, tokens[0])
        names.add(card.name)
        doc.devices.append(card)
    return doc


def format_netlist(doc: NetlistDoc) -> str:
    """Pretty-print ``doc`` so that ``parse_netlist`` reproduces it."""
    lines = [f"* {doc.title}" if doc.title else "*"]
    for dev in doc.devices:
        parts = [dev.name, *dev.nodes]
        if dev.kind in "RCL":
            parts.append(repr(dev.value))
        elif dev.kind in "VI":
            parts.append(dev.source.card_text())
        else:
            if dev.kind == "M":
                parts.append(dev.model.upper())
            parts.extend(f"{k.upper()}={v!r}" for k, v in dev.params)
        lines.append(" ".join(parts))
    for d in doc.directives:
        if isinstance(d, Tran):
            lines.append(f".TRAN {d.step_hint!r} {d.stop_time!r}")
        elif isinstance(d, Options) and d.values:
            lines.append(".OPTIONS " + " ".join(f"{k.upper()}={v!r}" for k, v in d.values))
    lines.append(".END")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# MNA assembly
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MnaSystem:
    n: int
    node_index: dict[str, int]
    branch_index: dict[str, int]
    C_lin: sp.csr_matrix
    G_lin: sp.csr_matrix
    B: sp.csr_matrix
    sources: list[SourceWaveform]
    source_names: list[str]
    nonlinear_devices: list
    gmin: float
    options: Options
    tran: Tran | None
    title: str = ""
    floating_nodes: list[str] = field(default_factory=list)

    @property
    def n_inputs(self) -> int:
        return len(self.sources)

    @property
    def n_nodes(self) -> int:
        return len(self.node_index)

    @property
    def is_linear(self) -> bool:
        return not self.nonlinear_devices

    @cached_property
    def linear_triplets(self) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
        """(rows, cols, vals) of G_lin and C_lin, for fast re-assembly with device stamps."""
        out = []
        for M in (self.G_lin, self.C_lin):
            coo = M.tocoo()
            out.append((coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.copy()))
        return out[0], out[1]

    def labels(self) -> list[str]:
        out = [""] * self.n
        for name, i in self.node_index.items():
            out[i] = name
        for name, i in self.branch_index.items():
            out[i] = f"i({name.lower()})"
        return out

    def index_of(self, label: str) -> int:
        label = label.lower()
        if label in self.node_index:
            return self.node_index[label]
        for name, i in self.branch_index.items():
            if label in (f"i({name.lower()})", name.lower()):
                return i
        raise KeyError(label)


def _floating_nodes(node_names: list[str], dc_edges: list[tuple[int, int]]) -> list[str]:
    """Nodes whose connected component in the DC-path graph does not contain ground."""
    n = len(node_names)
    g = n  # ground gets the extra vertex
    rows = [g if a < 0 else a for a, _ in dc_edges]
    cols = [g if b < 0 else b for _, b in dc_edges]
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + 1, n + 1))
    _, label = connected_components(adj, directed=False)
    return [nd for i, nd in enumerate(node_names) if label[i] != label[g]]


def build_mna(doc: NetlistDoc, gmin: float | None = None, strict: bool = False) -> MnaSystem:
    """Stamp the linear elements of ``doc`` and collect its nonlinear devices.

    Ground rows are dropped.  ``gmin`` (default: the GMIN option) is added on
    every node diagonal of G_lin.  Nodes without any DC path are recorded in
    ``floating_nodes``; with ``strict=True`` and ``gmin == 0`` they raise
    FloatingNode instead.
    """
    from .devices import make_device
    from .errors import FloatingNode

    opts = doc.options
    if gmin is None:
        gmin = float(opts.get("gmin"))
    node_names = doc.nodes()
    node_index = {nd: i for i, nd in enumerate(node_names)}
    n_nodes = len(node_names)
    branch_index: dict[str, int] = {}
    for dev in doc.devices:
        if dev.kind in "VL":
            branch_index[dev.name] = n_nodes + len(branch_index)
    n = n_nodes + len(branch_index)
    if n == 0:
        raise ContractViolation("netlist has no non-ground nodes")

    def idx(nd: str) -> int:
        return -1 if nd in GROUND_NAMES else node_index[nd]

    gr, gc, gv = [], [], []
    cr, cc, cv = [], [], []
    br, bc, bv = [], [], []
    sources: list[SourceWaveform] = []
    source_names: list[str] = []
    devices = []
    dc_edges: list[tuple[int, int]] = []

    def stamp2(rows, cols, vals, a, b, val):
        for i, j, s in ((a, a, 1.0), (b, b, 1.0), (a, b, -1.0), (b, a, -1.0)):
            if i >= 0 and j >= 0:
                rows.append(i)
                cols.append(j)
                vals.append(s * val)

    for dev in doc.devices:
        a, b = idx(dev.nodes[0]), idx(dev.nodes[1])
        if dev.kind == "R":
            stamp2(gr, gc, gv, a, b, 1.0 / dev.value)
            dc_edges.append((a, b))
        elif dev.kind == "C":
            stamp2(cr, cc, cv, a, b, dev.value)
        elif dev.kind in "VL":
            k = branch_index[dev.name]
            for nd, s in ((a, 1.0), (b, -1.0)):
                if nd >= 0:
                    gr += [nd, k]
                    gc += [k, nd]
                    gv += [s, s]
            if dev.kind == "L":
                cr.append(k)
                cc.append(k)
                cv.append(-dev.value)
            else:
                col = len(sources)
                sources.append(dev.source)
                source_names.append(dev.name)
                br.append(k)
                bc.append(col)
                bv.append(1.0)
            dc_edges.append((a, b))
        elif dev.kind == "I":
            col = len(sources)
            sources.append(dev.source)
            source_names.append(dev.name)
            for nd, s in ((a, -1.0), (b, 1.0)):
                if nd >= 0:
                    br.append(nd)
                    bc.append(col)
                    bv.append(s)
        else:
            d = make_device(dev, idx)
            devices.append(d)
            dc_edges.append(d.dc_terminals())

    for i in range(n_nodes):
        if gmin:
            gr.append(i)
            gc.append(i)
            gv.append(gmin)
    G = from_triplets(gr, gc, gv, (n, n))
    C = from_triplets(cr, cc, cv, (n, n))
    B = from_triplets(br, bc, bv, (n, len(sources)))
    floating = _floating_nodes(node_names, dc_edges)
    if strict and gmin == 0 and floating:
        raise FloatingNode(floating)
    return MnaSystem(
        n=n,
        node_index=node_index,
        branch_index=branch_index,
        C_lin=C,
        G_lin=G,
        B=B,
        sources=sources,
        source_names=source_names,
        nonlinear_devices=devices,
        gmin=gmin,
        options=opts,
        tran=doc.tran,
        title=doc.title,
        floating_nodes=floating,
    )


def eval_sources(sys: MnaSystem, t: float) -> np.ndarray:
    if t < 0:
        raise ContractViolation("eval_sources needs t >= 0")
    return np.array([s(t) for s in sys.sources], dtype=np.float64)


def source_breakpoints(sys: MnaSystem, t0: float, t1: float) -> list[float]:
    if not t0 < t1:
        raise ContractViolation("source_breakpoints needs t0 < t1")
    pts: set[float] = set()
    for s in sys.sources:
        pts.update(s.breakpoints(t0, t1))
    return sorted(pts)


def load_netlist(path) -> NetlistDoc:
    with open(path, encoding="utf-8") as fh:
        return parse_netlist(fh.read())


def concat_docs(docs: Iterable[NetlistDoc]) -> NetlistDoc:
    out = NetlistDoc()
    for d in docs:
        out.devices.extend(d.devices)
        out.directives.extend(d.directives)
    return out
