"""
EVOLIM Core - Shared orchestration for the command line interface

This module contains the pieces main.py builds on:
- ScenarioRunner: execute the solver a scenario asks for (eps | limit | psi | sweep)
- validate_scenario(): schema plus structural model checks, no solving
- run_scenario(): run, write deterministic artifacts, map failures to exit codes
- report_sweep(): re-read a sweep directory and summarise it

Artifacts are written only after the solvers return, so a configuration
error never leaves partial output behind.
"""
import logging
import shutil
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from ruamel.yaml import YAML

sys.path.insert(0, str(Path(__file__).parent))

from config import (
    EXIT_BLOW_UP, EXIT_CONFIG, EXIT_NON_CONVERGENCE, EXIT_OK, FLOAT_FORMAT, OUTPUT_DIR,
)
from Evolution import __version__
from Evolution.analysis import (
    branching_events, build_sweep_report, compare_runs, default_window, dirac_locate, fit_order,
    jump_times, SWEEP_METRICS,
)
from Evolution.errors import (
    BlowUpError, EvolimError, InvalidInputError, KernelRangeError, MetastableConvergenceError,
    ScenarioError, StructureWarning,
)
from Evolution.solvers.eps_solver import (
    AuditConstants, EpsTrace, audit, fit_audit_constants, initial_profile, run as run_eps,
)
from Evolution.solvers.limit_solver import LimitRunConfig, LimitTrace, psi_solve, solve_limit
from Evolution.trait_model import LogDensityState, TraitGrid, validate_structure
from scenario_loader import Scenario, load_scenario

logger = logging.getLogger(__name__)


# =============================================================================
# ARTIFACT WRITERS
# =============================================================================

def _yaml() -> YAML:
    yaml = YAML(typ="safe")
    yaml.default_flow_style = False
    return yaml


def write_yaml(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        _yaml().dump(data, handle)
    return path


def read_yaml(path: Path) -> Any:
    with path.open("r", encoding="utf-8") as handle:
        return _yaml().load(handle)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def snapshot_name(t: float) -> str:
    return f"phi_t{t:.6f}.csv"


def write_snapshots(directory: Path, snapshots: Dict[float, np.ndarray], grid: TraitGrid,
                    eps: float = 0.0, write_density: bool = False) -> List[Path]:
    paths = []
    for t in sorted(snapshots):
        columns = {"x": grid.nodes, "phi": snapshots[t]}
        if write_density and eps > 0:
            columns["u"] = np.exp(snapshots[t] / eps)
        paths.append(write_csv(pd.DataFrame(columns), directory / snapshot_name(t)))
    return paths


def limit_series_frame(trace: LimitTrace) -> pd.DataFrame:
    columns: Dict[str, Any] = {"t": trace.times}
    I = trace.I_array
    for i in range(trace.k):
        columns[f"I_{i + 1}"] = I[:, i]
    columns["atoms"] = trace.atom_counts
    columns["sup_phi"] = [float(trace.snapshots[t].max()) for t in trace.times]
    columns["max_violation"] = [c.max_violation_on_omega for c in trace.certificates]
    columns["max_residual"] = [c.max_residual_on_support for c in trace.certificates]
    return pd.DataFrame(columns)


# =============================================================================
# RESULTS
# =============================================================================

@dataclass
class RunResult:
    """Outcome of one CLI invocation."""
    exit_code: int
    run_dir: Optional[Path] = None
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


# =============================================================================
# SCENARIO RUNNER
# =============================================================================

class ScenarioRunner:
    """Run the solver(s) a scenario selects and collect artifacts in memory."""

    def __init__(self, scenario: Scenario, threads: int = 1):
        self.scenario = scenario
        self.threads = max(int(threads), 1)
        self.tables: Dict[str, pd.DataFrame] = {}
        self.documents: Dict[str, Any] = {}
        self.snapshot_sets: List[Dict[str, Any]] = []
        self.summary: Dict[str, Any] = {}

    def execute(self) -> "ScenarioRunner":
        handler = getattr(self, f"_run_{self.scenario.solver}", None)
        if handler is None:
            raise ScenarioError(f"Unknown solver: {self.scenario.solver}")
        handler()
        return self

    # ------------------------------------------------------------- solvers

    def _eps_traces(self) -> List[EpsTrace]:
        configs = [self.scenario.eps_config(eps) for eps in self.scenario.sorted_eps]
        if self.threads > 1 and len(configs) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(run_eps, configs))
        return [run_eps(c) for c in configs]

    def _add_eps_trace(self, trace: EpsTrace, prefix: str, constants: Optional[AuditConstants] = None):
        sc = self.scenario
        self.tables[f"{prefix}/series.csv"] = trace.to_frame()
        if sc.output.snapshots:
            self.snapshot_sets.append({"dir": f"{prefix}/snapshots", "snapshots": trace.snapshots,
                                       "grid": trace.grid, "eps": trace.eps})
        measures = []
        for t in trace.snapshot_times:
            state = LogDensityState(trace.grid, trace.snapshots[t], trace.eps, float(t))
            located = dirac_locate(state, sc.analysis.dirac_threshold)
            measures.append({"t": float(t), "atoms": located.to_dict()["atoms"]})
        self.documents[f"{prefix}/measures.yaml"] = measures
        constants = constants or AuditConstants(sup_phi=sc.analysis.sup_phi_constant)
        report = audit(trace, constants)
        self.documents[f"{prefix}/audit.yaml"] = report.to_dict()
        return report

    def _add_limit_trace(self, trace: LimitTrace, prefix: str) -> None:
        sc = self.scenario
        self.tables[f"{prefix}/series.csv"] = limit_series_frame(trace)
        if sc.output.snapshots:
            self.snapshot_sets.append({"dir": f"{prefix}/snapshots", "snapshots": trace.snapshots,
                                       "grid": trace.grid, "eps": 0.0})
        self.documents[f"{prefix}/measures.yaml"] = [
            {"t": float(t), **cert.to_dict()} for t, cert in zip(trace.times, trace.certificates)]
        self.documents[f"{prefix}/events.yaml"] = {
            "jumps": jump_times(trace.step_times[:-1], trace.step_I_array, sc.analysis.jump_threshold)
            if trace.step_I else [],
            "branching": branching_events(trace),
            "inactive_intervals": [[float(a), float(b)] for a, b in trace.inactive_intervals],
        }

    def _run_eps(self) -> None:
        final = {}
        for trace in self._eps_traces():
            prefix = f"eps_{trace.eps:g}"
            report = self._add_eps_trace(trace, prefix)
            final[prefix] = {"final_I": [float(v) for v in trace.I_array[-1]], "steps": trace.steps,
                             "audit_passed": report.passed}
        self.summary["eps_runs"] = final

    def _run_limit(self) -> LimitTrace:
        trace = solve_limit(self.scenario.limit_config())
        self._add_limit_trace(trace, "limit")
        self.summary["limit"] = {
            "final_I": [float(v) for v in trace.I_array[-1]],
            "atoms": trace.atom_counts[-1],
            "certificates_passed": all(c.passed for c in trace.certificates),
        }
        return trace

    def _run_psi(self) -> None:
        sc = self.scenario
        trace = self._run_limit()
        config = sc.limit_config()
        window = default_window(config.grid, sc.analysis.window_fraction)
        result = psi_solve(config, trace, window)
        if sc.output.snapshots:
            self.snapshot_sets.append({"dir": "limit/psi", "snapshots": trace.psi_snapshots,
                                       "grid": config.grid, "eps": 0.0})
        self_error = self._limit_self_error(config, trace, window)
        gap = result.to_dict()
        gap.update({"scheme_self_error": self_error, "within_twice_self_error": result.max_gap <= 2 * self_error})
        self.documents["limit/psi_gap.yaml"] = gap
        self.summary["psi"] = {"max_gap": result.max_gap, "scheme_self_error": self_error}

    @staticmethod
    def _limit_self_error(config: LimitRunConfig, trace: LimitTrace, window) -> float:
        """Grid-refinement estimate: coarse vs refined limit solve on the coarse nodes."""
        fine_grid = config.grid.refined()
        fine = solve_limit(LimitRunConfig(
            grid=fine_grid, kernel=config.kernel, model=config.model, t_end=config.t_end,
            initial=config.initial, cfl=config.cfl, zero_band=config.zero_band,
            band_factor=config.band_factor, dissipation=config.dissipation, lf_lambda=config.lf_lambda,
            output_times=sorted(trace.snapshots), metastable=config.metastable,
            phi_barrier=config.phi_barrier, guard=config.guard,
        ))
        x = config.grid.nodes
        inside = (x >= window[0]) & (x <= window[1])
        return float(max(np.max(np.abs(fine.snapshots[t][::2][inside] - trace.snapshots[t][inside]))
                         for t in trace.snapshots))

    def _run_sweep(self) -> None:
        sc = self.scenario
        traces = self._eps_traces()
        limit = self._run_limit()
        coarse = max(traces, key=lambda trace: trace.eps)
        constants = fit_audit_constants(coarse, sc.analysis.audit_slack,
                                        sup_phi_floor=sc.analysis.sup_phi_constant)
        window = default_window(sc.build_grid(), sc.analysis.window_fraction)
        rows = []
        for trace in traces:
            report = self._add_eps_trace(trace, f"eps_{trace.eps:g}", constants)
            row = compare_runs(trace, limit, window, sc.analysis.mass_fraction)
            row.audit_passed = report.passed
            rows.append(row)
        sweep = build_sweep_report(rows)
        self.tables["sweep_report.csv"] = sweep.to_frame()
        summary = sweep.summary()
        summary["audit_constants"] = constants.to_dict()
        self.documents["sweep_summary.yaml"] = summary
        self.summary["sweep"] = summary

    # ------------------------------------------------------------- writing

    def write(self, run_dir: Path) -> List[Path]:
        sc = self.scenario
        written = []
        for name, frame in sorted(self.tables.items()):
            written.append(write_csv(frame, run_dir / name))
        for name, document in sorted(self.documents.items()):
            written.append(write_yaml(run_dir / name, document))
        for entry in self.snapshot_sets:
            written.extend(write_snapshots(run_dir / entry["dir"], entry["snapshots"], entry["grid"],
                                           entry["eps"], sc.output.write_density))
        manifest = {
            "evolim_version": __version__,
            "scenario": sc.resolved(),
            "artifacts": sorted(str(p.relative_to(run_dir)) for p in written),
        }
        written.append(write_yaml(run_dir / "manifest.yaml", manifest))
        return written


# =============================================================================
# ENTRY POINTS
# =============================================================================

def validate_scenario(path, seed: Optional[int] = None) -> Dict[str, Any]:
    """
    Schema plus model checks (envelope decay, sampled root count and invertibility) without solving.

    Returns:
        Dictionary with 'passed', the structure report and every warning message
    """
    scenario = load_scenario(path)
    grid = scenario.build_grid()
    model = scenario.build_model()
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", StructureWarning)
        report = validate_structure(model, grid, scenario.k_bar, scenario.tolerances.structure_samples, rng,
                                    scenario.tolerances.boundary_tol)
    profile_ok, profile_message = True, ""
    try:
        profile = scenario.initial_profile()
        initial_profile(profile.name, profile.params, grid, 0.0, scenario.tolerances.phi_barrier)
    except ScenarioError as exc:
        profile_ok, profile_message = False, str(exc)
    return {
        "scenario": scenario.name,
        "passed": report.passed and profile_ok,
        "structure": report.to_dict(),
        "initial_profile_ok": profile_ok,
        "initial_profile_message": profile_message,
        "warnings": [str(w.message) for w in caught if issubclass(w.category, StructureWarning)],
    }


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ScenarioError, InvalidInputError)):
        return EXIT_CONFIG
    if isinstance(exc, (BlowUpError, KernelRangeError)):
        return EXIT_BLOW_UP
    if isinstance(exc, MetastableConvergenceError):
        return EXIT_NON_CONVERGENCE
    raise exc


def run_scenario(path, out_dir: Optional[Path] = None, threads: int = 1,
                 solver: Optional[str] = None) -> RunResult:
    """
    Load a scenario, run its solver and write the artifacts.

    Args:
        path: Scenario file
        out_dir: Artifact root (a sub-directory named after the scenario is used)
        threads: Worker threads for eps lists
        solver: Optional override of the scenario's solver (e.g. 'sweep')

    Returns:
        RunResult with exit code 0 / 2 / 3 / 4
    """
    try:
        scenario = load_scenario(path)
        if solver is not None:
            scenario = scenario.model_copy(update={"solver": solver})
            scenario._base_dir = Path(path).parent
    except EvolimError as exc:
        logger.error("%s", exc)
        return RunResult(EXIT_CONFIG, error={**exc.to_dict(), "exit_code": EXIT_CONFIG})

    root = Path(out_dir) if out_dir is not None else Path(scenario.output.dir or OUTPUT_DIR)
    run_dir = root / scenario.name
    runner = ScenarioRunner(scenario, threads)
    try:
        runner.execute()
    except EvolimError as exc:
        code = exit_code_for(exc)
        error = {**exc.to_dict(), "exit_code": code}
        logger.error("%s failed: %s", scenario.name, exc)
        if code == EXIT_CONFIG:
            return RunResult(code, error=error)
        artifacts = []
        if run_dir.exists():
            shutil.rmtree(run_dir)
        trace = getattr(exc, "trace", None)
        if isinstance(trace, EpsTrace) and trace.times:
            artifacts.append(write_csv(trace.to_frame(), run_dir / f"eps_{trace.eps:g}" / "series.csv"))
        artifacts.append(write_yaml(run_dir / "error.yaml", error))
        return RunResult(code, run_dir, artifacts, error=error)

    if run_dir.exists():
        shutil.rmtree(run_dir)
    artifacts = runner.write(run_dir)
    logger.info("%s: wrote %d artifacts to %s", scenario.name, len(artifacts), run_dir)
    return RunResult(EXIT_OK, run_dir, artifacts, runner.summary)


def report_sweep(sweep_dir) -> Dict[str, Any]:
    """Re-read sweep_report.csv, refit the orders and write sweep_summary.yaml."""
    sweep_dir = Path(sweep_dir)
    csv_path = sweep_dir / "sweep_report.csv"
    if not csv_path.is_file():
        raise ScenarioError(f"no sweep_report.csv in {sweep_dir}")
    frame = pd.read_csv(csv_path).sort_values("eps", ascending=False)
    eps = frame["eps"].to_numpy(dtype=float)
    orders: Dict[str, Optional[float]] = {}
    decreasing: Dict[str, bool] = {}
    for metric in SWEEP_METRICS:
        values = frame[metric].to_numpy(dtype=float)
        orders[metric] = fit_order(eps, values) if len(values) >= 2 and np.all(values > 0) else None
        decreasing[metric] = bool(np.all(np.diff(values) < 0))
    summary = {
        "eps_values": [float(e) for e in eps],
        "orders": orders,
        "strictly_decreasing": decreasing,
        "rows": frame.to_dict(orient="records"),
    }
    write_yaml(sweep_dir / "sweep_summary.yaml", {k: v for k, v in summary.items() if k != "rows"})
    return summary
