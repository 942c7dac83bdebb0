"""Deterministic benchmark deck generators.

Three families are produced as SPICE-subset text:

RC_LADDER
    A voltage source driving a chain of series resistors with a grounded
    capacitor at every tap.
INVERTER_CHAIN
    CMOS inverters built from level-1 MOSFETs, each output loaded by a
    grounded capacitor and the next gate.  The supply and input sources sit
    behind small series resistors so that no loop is made only of sources
    and capacitors.
COUPLED_MESH
    A resistive grid with grounded capacitors plus randomly placed coupling
    capacitors between non-adjacent nodes, which gives C a much wider sparsity
    pattern than G.  An inverter drives one corner of the grid.

All element values are drawn log-uniformly from the configured ranges with a
``numpy.random.Generator`` seeded from ``seed``, so a given parameter set
always yields byte-identical text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

KINDS = ("RC_LADDER", "INVERTER_CHAIN", "COUPLED_MESH")


@dataclass(frozen=True)
class GeneratorParams:
    kind: str
    stages: int
    coupling_density: float = 0.0
    r_range: tuple[float, float] = (100.0, 1000.0)
    c_range: tuple[float, float] = (10e-15, 100e-15)
    cc_range: tuple[float, float] = (1e-15, 10e-15)
    seed: int = 0
    vdd: float = 1.8

    def __post_init__(self):
        if self.kind.upper() not in KINDS:
            raise ContractViolation(f"unknown generator kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        object.__setattr__(self, "kind", self.kind.upper())
        if self.stages < 1:
            raise ContractViolation("stages must be at least 1")
        if not 0.0 <= self.coupling_density <= 1.0:
            raise ContractViolation("coupling_density must lie in [0, 1]")
        for name in ("r_range", "c_range", "cc_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ContractViolation(f"{name} must satisfy 0 < low <= high")
        if not 0 <= self.seed < 2**64:
            raise ContractViolation("seed must be a 64-bit unsigned integer")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _log_uniform(rng: np.random.Generator, bounds: tuple[float, float], size=None):
    lo, hi = bounds
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


_NMOS = "NMOS VTH=0.5 KP=1e-4 LAMBDA=0.05 W=2u L=1u CGS=2f CGD=0.5f"
_PMOS = "PMOS VTH=0.5 KP=4e-5 LAMBDA=0.05 W=5u L=1u CGS=2f CGD=0.5f"


def _inverter(lines: list[str], tag: str, inp: str, out: str):
    lines.append(f"MP{tag} {out} {inp} vdd vdd {_PMOS}")
    lines.append(f"MN{tag} {out} {inp} 0 0 {_NMOS}")


def _supply(lines: list[str], p: GeneratorParams):
    lines.append(f"VDD vsup 0 DC {_fmt(p.vdd)}")
    lines.append("RDD vsup vdd 1")


def rc_ladder(p: GeneratorParams) -> str:
    rng = np.random.default_rng(p.seed)
    R = _log_uniform(rng, p.r_range, p.stages)
    C = _log_uniform(rng, p.c_range, p.stages)
    # Elmore delay at the far end sets the time scale
    elmore = sum(R[i] * C[i:].sum() for i in range(p.stages))
    t_stop = 5.0 * elmore
    rise = t_stop / 20.0
    lines = [f"* RC_LADDER stages={p.stages} seed={p.seed}"]
    lines.append(f"V1 in 0 PWL(0 0 {_fmt(rise)} 1)")
    prev = "in"
    for i in range(p.stages):
        node = f"n{i + 1}"
        lines.append(f"R{i + 1} {prev} {node} {_fmt(R[i])}")
        lines.append(f"C{i + 1} {node} 0 {_fmt(C[i])}")
        prev = node
    lines.append(f".TRAN {_fmt(rise / 10)} {_fmt(t_stop)}")
    lines.append(".END")
    return "\n".join(lines) + "\n"


def inverter_chain(p: GeneratorParams) -> str:
    rng = np.random.default_rng(p.seed)
    C = _log_uniform(rng, p.c_range, p.stages)
    lines = [f"* INVERTER_CHAIN stages={p.stages} seed={p.seed}"]
    _supply(lines, p)
    rise = 50e-12
    lines.append(f"VIN vs 0 PWL(0 0 {_fmt(rise)} 0 {_fmt(3 * rise)} {_fmt(p.vdd)})")
    lines.append("RIN vs in 50")
    prev = "in"
    for i in range(p.stages):
        out = f"o{i + 1}"
        _inverter(lines, str(i + 1), prev, out)
        lines.append(f"CL{i + 1} {out} 0 {_fmt(C[i])}")
        prev = out
    # about 250 ps of switching per stage for a 30 fF load at the default sizes
    t_stop = 3 * rise + 250e-12 * p.stages * float(np.mean(C)) / 30e-15
    lines.append(f".TRAN {_fmt(rise / 5)} {_fmt(t_stop)}")
    lines.append(".END")
    return "\n".join(lines) + "\n"


def _grid_shape(n: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def coupled_mesh(p: GeneratorParams) -> str:
    rng = np.random.default_rng(p.seed)
    n = p.stages
    rows, cols = _grid_shape(n)

    def name(k: int) -> str:
        return f"m{k}"

    edges = []
    for k in range(n):
        r, c = divmod(k, cols)
        if c + 1 < cols and k + 1 < n:
            edges.append((k, k + 1))
        if k + cols < n:
            edges.append((k, k + cols))
    adjacent = set(edges)
    R = _log_uniform(rng, p.r_range, len(edges))
    Cg = _log_uniform(rng, p.c_range, n)

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in adjacent]
    n_couple = min(len(pairs), int(round(p.coupling_density * n * n)))
    chosen = sorted(rng.choice(len(pairs), size=n_couple, replace=False).tolist()) if n_couple else []
    Cc = _log_uniform(rng, p.cc_range, n_couple)

    lines = [f"* COUPLED_MESH stages={n} density={_fmt(p.coupling_density)} seed={p.seed}"]
    _supply(lines, p)
    rise = 50e-12
    lines.append(f"VIN vs 0 PWL(0 0 {_fmt(rise)} 0 {_fmt(3 * rise)} {_fmt(p.vdd)})")
    lines.append("RIN vs in 50")
    _inverter(lines, "DRV", "in", "drv")
    lines.append(f"RDRV drv {name(0)} 10")
    for e, (i, j) in enumerate(edges):
        lines.append(f"R{e + 1} {name(i)} {name(j)} {_fmt(R[e])}")
    for k in range(n):
        lines.append(f"CG{k + 1} {name(k)} 0 {_fmt(Cg[k])}")
    for q, idx in enumerate(chosen):
        i, j = pairs[idx]
        lines.append(f"CC{q + 1} {name(i)} {name(j)} {_fmt(Cc[q])}")
    # the driver charges the whole grid capacitance through its on-resistance
    c_total = float(Cg.sum() + Cc.sum())
    t_stop = 3 * rise + 3 * 4e3 * c_total / max(1.0, math.sqrt(n))
    lines.append(f".TRAN {_fmt(rise / 5)} {_fmt(t_stop)}")
    lines.append(".END")
    return "\n".join(lines) + "\n"


def generate(p: GeneratorParams) -> str:
    """Deck text for ``p``."""
    return {"RC_LADDER": rc_ladder, "INVERTER_CHAIN": inverter_chain, "COUPLED_MESH": coupled_mesh}[p.kind](p)
