"""Command-line frontend: ``ersim simulate|bench|gen|matstats``.

Exit codes: 0 success, 2 input error (bad deck, missing file, bad flag
value), 3 numerical failure (singular matrix, step failure, no DC solution).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractViolation, ErsimError, NetlistError, NumericalError
from .generators import KINDS, GeneratorParams, generate
from .integrate import METHODS, CorrectionSpec, StepControl, Waveform, cost_report, transient
from .netlist import MnaSystem, build_mna, load_netlist, parse_netlist
from .sparse_core import lu_factor, write_matrix_market

log = logging.getLogger("ersim")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(ErsimError):
    """Bad command-line input that is not a netlist syntax error."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _load_system(path: str) -> MnaSystem:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"cannot read deck {path}: no such file")
    return build_mna(load_netlist(p))


def _control(sys_: MnaSystem, args) -> StepControl:
    ctl = StepControl.from_system(
        sys_,
        eps=getattr(args, "eps", None),
        err_budget=getattr(args, "errbudget", None),
        hmax=getattr(args, "hmax", None),
        hmin=getattr(args, "hmin", None),
        m_max=getattr(args, "mmax", None),
    )
    trace_path = getattr(args, "trace_krylov", None)
    if trace_path:
        fh = open(trace_path, "w", encoding="utf-8")
        fh.write("j,h_sub,residual,h_next\n")

        def trace(j, h, res, h_next):
            fh.write(f"{j},{h:.17g},{res:.17g},{h_next:.17g}\n")

        ctl.krylov_trace = trace
    return ctl


def _run_timed(sys_: MnaSystem, method: str, ctl: StepControl, t_stop: float | None,
               gamma: float, fixed_h: float | None = None):
    corr = CorrectionSpec(gamma) if method == "ERC" else None
    t0 = time.perf_counter()
    wave, recs = transient(sys_, method, ctl, t_stop, fixed_h=fixed_h, correction=corr)
    return wave, recs, time.perf_counter() - t0


def _write_records(path: Path, recs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(r.to_json() + "\n")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    sys_ = _load_system(args.deck)
    method = args.method.upper()
    ctl = _control(sys_, args)
    wave, recs, wall = _run_timed(sys_, method, ctl, args.t_stop, args.gamma, args.fixed_h)
    out = Path(getattr(args, "output", None) or Path(args.deck).with_suffix(f".{method.lower()}.csv").name)
    nodes = args.nodes.split(",") if args.nodes else None
    wave.to_csv(out, nodes)
    cost = cost_report(recs)
    summary = {
        "deck": str(args.deck),
        "method": method,
        "steps": cost.steps,
        "lu_total": cost.lu_total,
        "m_avg": cost.m_avg,
        "nr_avg": cost.nr_avg,
        "rejects": cost.rejects,
        "wall_time_s": wall,
        "t_stop": wave.times[-1],
        "waveform": str(out),
    }
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if args.records:
        _write_records(Path(args.records), recs)
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


@dataclass
class BenchSpec:
    """One benchmark: a deck, the methods to compare and the reference run."""

    deck_text: str
    methods: list[str] = field(default_factory=lambda: ["BENR", "ER", "ERC"])
    t_stop: float | None = None
    h_ref: float | None = None
    record_nodes: list[str] | None = None
    gamma: float = 0.1
    name: str = "bench"

    def __post_init__(self):
        self.methods = [m.upper() for m in self.methods]
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ContractViolation(f"unknown method(s): {', '.join(bad)}")


@dataclass
class BenchRow:
    method: str
    steps: int | str = ""
    nr_avg: float | str = ""
    m_avg: float | str = ""
    lu_total: int | str = ""
    wall_s: float | str = ""
    speedup: float | str = ""
    max_err: float | str = ""
    rms_err: float | str = ""

    def cells(self) -> list[str]:
        out = []
        for v in (self.method, self.steps, self.nr_avg, self.m_avg, self.lu_total, self.wall_s,
                  self.speedup, self.max_err, self.rms_err):
            out.append(f"{v:.4g}" if isinstance(v, float) else str(v))
        return out


BENCH_COLUMNS = ["method", "steps", "NR_a", "m_a", "lu_total", "wall_s", "speedup", "max_err", "rms_err"]


def waveform_error(wave: Waveform, ref: Waveform, nodes: list[str]) -> tuple[float, float]:
    """Max and RMS difference on ``nodes``, the reference interpolated at the wave's time points."""
    diffs = []
    for nd in nodes:
        r = np.interp(wave.t, ref.t, ref.signal(nd))
        diffs.append(wave.signal(nd) - r)
    d = np.concatenate(diffs)
    return float(np.max(np.abs(d))), float(math.sqrt(np.mean(d * d)))


def run_bench(spec: BenchSpec, ctl_overrides: dict | None = None, parallel: bool = False,
              out_dir: Path | None = None) -> list[BenchRow]:
    sys_ = build_mna(parse_netlist(spec.deck_text))
    ctl = StepControl.from_system(sys_, **(ctl_overrides or {}))
    t_stop = spec.t_stop or (sys_.tran.stop_time if sys_.tran else None)
    if t_stop is None:
        raise ContractViolation("bench needs a stop time (deck .TRAN or --t-stop)")
    nodes = spec.record_nodes or list(sys_.node_index)
    hint = sys_.tran.step_hint if sys_.tran else t_stop / 100
    h_ref = spec.h_ref or hint / 10
    if h_ref > hint / 10 * (1 + 1e-12):
        raise ContractViolation("reference step must be at most a tenth of the deck step hint")

    rows: list[BenchRow] = []
    ref_wave, ref_recs, ref_wall = _run_timed(sys_, "BENR", ctl, t_stop, spec.gamma, fixed_h=h_ref)
    c = cost_report(ref_recs)
    e_max, e_rms = waveform_error(ref_wave, ref_wave, nodes)
    rows.append(BenchRow("REF(BENR)", c.steps, c.nr_avg, c.m_avg, c.lu_total, ref_wall, "", e_max, e_rms))

    def attempt(method):
        try:
            return _run_timed(sys_, method, ctl, t_stop, spec.gamma)
        except NumericalError as e:
            return e

    if parallel:
        with ThreadPoolExecutor() as pool:
            results = dict(zip(spec.methods, pool.map(attempt, spec.methods)))
        # wall times from a serial pass so concurrent runs do not disturb each other
        for m in spec.methods:
            if not isinstance(results[m], Exception):
                wave, recs, _ = results[m]
                again = attempt(m)
                results[m] = (wave, recs, again[2] if not isinstance(again, Exception) else float("nan"))
    else:
        results = {m: attempt(m) for m in spec.methods}

    benr_wall = None
    if "BENR" in results and not isinstance(results["BENR"], Exception):
        benr_wall = results["BENR"][2]
    for m in spec.methods:
        res = results[m]
        if isinstance(res, Exception):
            rows.append(BenchRow(m, f"FAILED({type(res).__name__}: {res})"))
            continue
        wave, recs, wall = res
        c = cost_report(recs)
        e_max, e_rms = waveform_error(wave, ref_wave, nodes)
        speed = benr_wall / wall if benr_wall else ""
        rows.append(BenchRow(m, c.steps, c.nr_avg, c.m_avg, c.lu_total, wall, speed, e_max, e_rms))
        if out_dir is not None:
            _write_records(out_dir / f"{spec.name}.{m.lower()}.jsonl", recs)
    return rows


def format_table(rows: list[BenchRow]) -> str:
    cells = [BENCH_COLUMNS] + [r.cells() for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(BENCH_COLUMNS))]
    lines = ["  ".join(c[i].ljust(widths[i]) for i in range(len(widths))).rstrip() for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    if args.deck:
        p = Path(args.deck)
        if not p.is_file():
            raise InputError(f"cannot read deck {args.deck}: no such file")
        text, name = p.read_text(encoding="utf-8"), p.stem
    elif args.gen:
        params = GeneratorParams(args.gen, args.stages, args.density, seed=getattr(args, "seed", None) or 0)
        text, name = generate(params), args.gen.lower()
    else:
        raise InputError("bench needs a deck path or --gen KIND")
    parse_netlist(text)  # surface syntax errors as input errors before any work
    spec = BenchSpec(text, args.methods.split(","), args.t_stop, args.h_ref,
                     args.nodes.split(",") if args.nodes else None, args.gamma, name)
    out_dir = Path(getattr(args, "output", None) or "bench_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = {k: getattr(args, a, None) for k, a in
                 (("eps", "eps"), ("err_budget", "errbudget"), ("hmax", "hmax"), ("hmin", "hmin"), ("m_max", "mmax"))}
    rows = run_bench(spec, overrides, args.parallel, out_dir)
    with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(r.cells())
    table = format_table(rows)
    (out_dir / f"{name}.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    params = GeneratorParams(args.kind, args.stages, args.density, seed=getattr(args, "seed", None) or 0)
    text = generate(params)
    out = getattr(args, "output", None)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# matstats
# ---------------------------------------------------------------------------


def _fill(M) -> int | str:
    try:
        return lu_factor(M).fill_nnz
    except NumericalError:
        return "singular"


def matrix_stats(sys_: MnaSystem, h: float) -> dict:
    C, G = sys_.C_lin, sys_.G_lin
    CG = (C / h + G).tocsr()
    return {
        "n": sys_.n,
        "h": h,
        "nnz": {"C": int(C.nnz), "G": int(G.nnz), "C/h+G": int(CG.nnz)},
        "fill_nnz": {"C": _fill(C), "G": _fill(G), "C/h+G": _fill(CG)},
    }


def cmd_matstats(args) -> int:
    sys_ = _load_system(args.deck)
    h = args.h if args.h else (sys_.tran.step_hint if sys_.tran else None)
    if not h or h <= 0:
        raise InputError("matstats needs a positive --h (or a .TRAN card)")
    stats = matrix_stats(sys_, h)
    text = json.dumps(stats, indent=2) + "\n"
    out = getattr(args, "output", None)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if args.mm_dir:
        d = Path(args.mm_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_matrix_market(d / "C.mtx", sys_.C_lin, "capacitance matrix C")
        write_matrix_market(d / "G.mtx", sys_.G_lin, "conductance matrix G")
        write_matrix_market(d / "CG.mtx", (sys_.C_lin / h + sys_.G_lin).tocsr(), f"C/h + G at h={h:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _common_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--eps", type=_positive, default=S, help="Krylov residual tolerance")
    p.add_argument("--errbudget", type=_positive, default=S, help="per-step error budget (infinity norm)")
    p.add_argument("--hmax", type=_positive, default=S, help="largest step size in seconds")
    p.add_argument("--hmin", type=_positive, default=S, help="smallest step size in seconds")
    p.add_argument("--mmax", type=int, default=S, help="Krylov dimension cap")
    p.add_argument("--seed", type=int, default=S, help="generator seed")
    p.add_argument("--output", "-o", default=S, help="output file (directory for bench)")
    p.add_argument("--trace-krylov", dest="trace_krylov", default=S, metavar="CSV",
                   help="write per-iteration Arnoldi residuals to CSV")
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ersim", description="Exponential Rosenbrock-Euler circuit simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a transient simulation")
    _common_flags(p)
    p.add_argument("deck")
    p.add_argument("--method", "-m", default="er", type=str.lower, choices=[m.lower() for m in METHODS])
    p.add_argument("--t-stop", dest="t_stop", type=_positive, default=None)
    p.add_argument("--fixed-h", dest="fixed_h", type=_positive, default=None, help="fixed step, no error control")
    p.add_argument("--gamma", type=float, default=0.1, help="ERC correction weight")
    p.add_argument("--nodes", default=None, help="comma-separated columns to write (default: all)")
    p.add_argument("--records", default=None, help="write step records as JSON lines")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="compare methods against a small-step BENR reference")
    _common_flags(p)
    p.add_argument("deck", nargs="?")
    p.add_argument("--gen", type=str.upper, choices=KINDS, default=None)
    p.add_argument("--stages", type=int, default=10)
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--methods", default="BENR,ER,ERC")
    p.add_argument("--t-stop", dest="t_stop", type=_positive, default=None)
    p.add_argument("--h-ref", dest="h_ref", type=_positive, default=None)
    p.add_argument("--nodes", default=None)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen", help="write a generated benchmark deck")
    _common_flags(p)
    p.add_argument("kind", type=str.upper, choices=KINDS)
    p.add_argument("--stages", type=int, default=10)
    p.add_argument("--density", type=float, default=0.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("matstats", help="sparsity and LU fill of C, G and C/h+G")
    _common_flags(p)
    p.add_argument("deck")
    p.add_argument("--h", type=_positive, default=None)
    p.add_argument("--mm-dir", dest="mm_dir", default=None, help="also dump Matrix Market files here")
    p.set_defaults(func=cmd_matstats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NetlistError, InputError, ContractViolation, OSError) as e:
        print(f"ersim: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as e:
        print(f"ersim: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
