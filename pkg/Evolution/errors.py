"""
EVOLIM errors - one hierarchy for every failure the solvers can report.

Each class also derives from the builtin exception that plain Python code
would raise for the same situation, so callers that only know about
ValueError / RuntimeError keep working.
"""
from typing import Any, Dict, Optional


class EvolimError(Exception):
    """Base class for all EVOLIM errors."""

    kind = "error"

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "message": str(self)}


class InvalidInputError(EvolimError, ValueError):
    """Non-finite or negative fields, bad grids, support outside the feasible set."""

    kind = "invalid_input"


class KernelRangeError(EvolimError, OverflowError):
    """Exponent argument of H or H_eps beyond the overflow guard."""

    kind = "range"

    def __init__(self, message: str, max_argument: float = float("nan")):
        super().__init__(message)
        self.max_argument = max_argument

    def to_dict(self) -> Dict[str, Any]:
        d = super().to_dict()
        d["max_argument"] = float(self.max_argument)
        return d


class ScenarioError(EvolimError, ValueError):
    """Scenario schema problems, invalid profiles, mismatched inputs."""

    kind = "config"

    def __init__(self, message: str, problems: Optional[list] = None):
        super().__init__(message)
        self.problems = list(problems or [])

    def to_dict(self) -> Dict[str, Any]:
        d = super().to_dict()
        if self.problems:
            d["problems"] = list(self.problems)
        return d


class BlowUpError(EvolimError, RuntimeError):
    """The eps-level solver left its stability region (carries the partial trace)."""

    kind = "blow_up"

    def __init__(self, message: str, time: float = float("nan"),
                 diagnostics: Optional[Dict[str, Any]] = None, trace: Any = None):
        super().__init__(message)
        self.time = time
        self.diagnostics = dict(diagnostics or {})
        self.trace = trace

    def to_dict(self) -> Dict[str, Any]:
        d = super().to_dict()
        d["time"] = float(self.time)
        d["diagnostics"] = {k: float(v) if isinstance(v, (int, float)) else str(v)
                            for k, v in self.diagnostics.items()}
        return d


class MetastableConvergenceError(EvolimError, RuntimeError):
    """Entropy minimizer or replicator flow did not converge within max_iters."""

    kind = "non_convergence"

    def __init__(self, message: str, best: Any = None,
                 residuals: Optional[Dict[str, float]] = None, time: Optional[float] = None):
        super().__init__(message)
        self.best = best
        self.residuals = dict(residuals or {})
        self.time = time

    def with_time(self, time: float) -> "MetastableConvergenceError":
        """Return a copy stamped with the HJ driver time at which it happened."""
        return MetastableConvergenceError(
            f"t={time:.6g}: {self}", best=self.best, residuals=self.residuals, time=time
        )

    def to_dict(self) -> Dict[str, Any]:
        d = super().to_dict()
        d["residuals"] = {k: float(v) for k, v in self.residuals.items()}
        if self.time is not None:
            d["time"] = float(self.time)
        return d


class StructureWarning(UserWarning):
    """A sampled structural assumption on the growth functions looks violated."""
