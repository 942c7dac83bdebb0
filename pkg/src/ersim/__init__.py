"""Transient circuit simulation with exponential Rosenbrock-Euler integration.

The package assembles modified nodal analysis systems from a SPICE-subset
netlist and integrates them either with backward Euler plus Newton-Raphson or
with an exponential Rosenbrock-Euler step whose matrix exponential products
are built on the invert Krylov subspace of ``-G^{-1} C``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ContractViolation,
    ErsimError,
    FloatingNode,
    NetlistError,
    NoConvergence,
    NoDcConvergence,
    NumericalError,
    SingularMatrix,
    SingularReducedMatrix,
    StepFailure,
    ZeroStartVector,
)
from .integrate import CorrectionSpec, StepControl, cost_report, dc_solve, transient  # noqa: E402
from .netlist import build_mna, load_netlist, parse_netlist  # noqa: E402

__all__ = [
    "ContractViolation",
    "CorrectionSpec",
    "ErsimError",
    "FloatingNode",
    "NetlistError",
    "NoConvergence",
    "NoDcConvergence",
    "NumericalError",
    "SingularMatrix",
    "SingularReducedMatrix",
    "StepControl",
    "StepFailure",
    "ZeroStartVector",
    "build_mna",
    "cost_report",
    "dc_solve",
    "load_netlist",
    "parse_netlist",
    "transient",
]
