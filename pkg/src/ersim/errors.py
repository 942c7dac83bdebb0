"""Exception hierarchy shared by the solver modules."""


class ErsimError(Exception):
    """Base class for all simulator errors."""


class ContractViolation(ErsimError, ValueError):
    """An operation was called with arguments outside its contract."""


class NumericalError(ErsimError):
    """Base class for failures of the numerical machinery (CLI exit code 3)."""


class SingularMatrix(NumericalError):
    def __init__(self, index: int, pivot: float = 0.0, message: str | None = None):
        self.index = index
        self.pivot = pivot
        super().__init__(message or f"matrix is singular at pivot {index} (|pivot| = {pivot:.3g})")


class FloatingNode(SingularMatrix):
    """Conductance matrix is singular because some nodes have no DC path."""

    def __init__(self, nodes: list[str], index: int = -1):
        self.nodes = list(nodes)
        super().__init__(index, 0.0, "floating node(s) with no DC path to ground: " + ", ".join(self.nodes))


class ZeroStartVector(NumericalError, ValueError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, residual: float, m: int):
        self.residual = residual
        self.m = m
        super().__init__(f"Krylov subspace hit m_max={m} with residual {residual:.3g}")


class SingularReducedMatrix(NumericalError):
    pass


class NoDcConvergence(NumericalError):
    pass


class StepFailure(NumericalError):
    def __init__(self, t: float, h: float, reason: str = ""):
        self.t = t
        self.h = h
        msg = f"time step {h:.3g} fell below HMIN at t={t:.6g}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class NetlistError(ErsimError):
    """Lexical or syntax error in a netlist (CLI exit code 2)."""

    def __init__(self, message: str, line: int | None = None, token: str | None = None):
        self.line = line
        self.token = token
        where = f"line {line}: " if line is not None else ""
        tok = f" (near {token!r})" if token is not None else ""
        super().__init__(f"{where}{message}{tok}")
