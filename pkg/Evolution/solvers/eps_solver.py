"""
EPS Solver - direct solver for the eps-scaled population/resource system.

The log-density phi_eps = eps log u_eps is evolved by Heun's method,

    d/dt phi = sum_i I_i eta_i - 1 + H_eps(phi),

with the resources recomputed algebraically from the current state at both
stages. u_eps only ever appears inside log-space quadratures. Every recorded
step feeds the a-priori-estimate audit (mass, Lipschitz and semiconvexity
bounds, lower bound on H_eps, time-derivative bound).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..errors import BlowUpError, InvalidInputError, KernelRangeError, ScenarioError
from ..trait_model import (
    EXPONENT_GUARD, LogDensityState, MutationKernel, ResourceModel, ResourceVector, TraitGrid,
    discrete_lipschitz, discrete_semiconvexity, hamiltonian_H_eps_field, hamiltonian_H_prime,
    log_mass, resource_response_from_state,
)

logger = logging.getLogger(__name__)


# ============================================================================
# INITIAL PROFILES
# ============================================================================

PROFILE_NAMES = ("well", "double_well", "custom")


@dataclass
class InitialProfile:
    """Named initial profile plus its parameters."""
    name: str = "well"
    params: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        params = {k: (str(v) if isinstance(v, Path) else v) for k, v in self.params.items()}
        return {"name": self.name, "params": params}


def _well(x: np.ndarray, center: float) -> np.ndarray:
    return 1.0 - np.sqrt(1.0 + (x - center) ** 2)


def _read_custom_table(params: Dict[str, Any]) -> Tuple[np.ndarray, np.ndarray]:
    if "path" in params:
        path = Path(params["path"])
        if not path.exists():
            raise ScenarioError(f"custom profile file not found: {path}")
        frame = pd.read_csv(path)
        missing = {"x", "phi"} - set(frame.columns)
        if missing:
            raise ScenarioError(f"custom profile {path.name} lacks columns {sorted(missing)}")
        return frame["x"].to_numpy(dtype=float), frame["phi"].to_numpy(dtype=float)
    if "x" in params and "phi" in params:
        return np.asarray(params["x"], dtype=float), np.asarray(params["phi"], dtype=float)
    raise ScenarioError("custom profile needs either 'path' or 'x' and 'phi' tables")


def initial_profile(name: str, params: Optional[Dict[str, Any]], grid: TraitGrid,
                    eps: float = 0.0, phi_barrier: float = 8.0) -> LogDensityState:
    """
    Build phi^0 on the grid.

    well:        1 - sqrt(1 + (x - x0)^2)                         (|phi'| < 1, phi'' >= -1)
    double_well: max_i (h_i + well(x - c_i)), shifted so max = 0  (max of semiconvex wells)
    custom:      table (x, phi) or CSV with columns x, phi, linearly interpolated;
                 normalised to max 0 only with normalize: true

    Both grid ends must sit below -phi_barrier.
    """
    params = dict(params or {})
    x = grid.nodes
    if name == "well":
        phi = _well(x, float(params.get("x0", 0.0)))
    elif name == "double_well":
        centers = [float(c) for c in params.get("centers", (-1.0, 1.0))]
        heights = [float(h) for h in params.get("heights", [0.0] * len(centers))]
        if len(heights) != len(centers) or not centers:
            raise ScenarioError("double_well needs matching 'centers' and 'heights'")
        phi = np.max([h + _well(x, c) for c, h in zip(centers, heights)], axis=0)
        phi = phi - phi.max()
    elif name == "custom":
        x_table, phi_table = _read_custom_table(params)
        if x_table.size < 2 or np.any(np.diff(x_table) <= 0):
            raise ScenarioError("custom profile x column must be strictly increasing")
        phi = np.interp(x, x_table, phi_table)
        if params.get("normalize", False):
            phi = phi - phi.max()
    else:
        raise ScenarioError(f"Unknown initial profile: {name} (expected one of {PROFILE_NAMES})")

    if not np.all(np.isfinite(phi)):
        raise ScenarioError(f"initial profile '{name}' has non-finite values")
    if max(phi[0], phi[-1]) > -phi_barrier:
        raise ScenarioError(
            f"initial profile '{name}' violates the boundary barrier: phi = {phi[0]:.4g}, {phi[-1]:.4g} "
            f"at the grid ends, need <= {-phi_barrier:g}")
    return LogDensityState(grid, phi, eps, 0.0)


# ============================================================================
# CONFIG / TRACE
# ============================================================================

@dataclass
class EpsRunConfig:
    eps: float
    t_end: float
    grid: TraitGrid
    kernel: MutationKernel
    model: ResourceModel
    initial: InitialProfile = field(default_factory=InitialProfile)
    initial_state: Optional[LogDensityState] = None
    dt: Optional[float] = None
    cfl: float = 0.5
    n_outputs: int = 10
    output_times: Optional[Sequence[float]] = None
    audit_every: int = 1
    phi_barrier: float = 8.0
    guard: float = EXPONENT_GUARD
    frozen_resources: Optional[Sequence[float]] = None
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise InvalidInputError(f"eps must be positive, got {self.eps}")
        if not self.t_end > 0:
            raise InvalidInputError(f"t_end must be positive, got {self.t_end}")
        if not 0 < self.cfl <= 1:
            raise InvalidInputError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.dt is not None and not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if self.audit_every < 1:
            raise InvalidInputError("audit_every must be >= 1")
        if self.frozen_resources is not None and len(self.frozen_resources) != self.model.k:
            raise InvalidInputError("frozen_resources needs one value per resource")

    def output_grid(self) -> np.ndarray:
        if self.output_times is not None:
            times = np.unique(np.clip(np.asarray(self.output_times, dtype=float), 0.0, self.t_end))
        else:
            times = np.linspace(0.0, self.t_end, max(self.n_outputs, 1) + 1)
        return times

    def initial_state_for_run(self) -> LogDensityState:
        if self.initial_state is not None:
            return LogDensityState(self.grid, self.initial_state.phi, self.eps, self.initial_state.t)
        return initial_profile(self.initial.name, self.initial.params, self.grid, self.eps, self.phi_barrier)


@dataclass
class EpsTrace:
    """Recorded diagnostics of one eps-level run; every series is aligned with times."""
    eps: float
    grid: TraitGrid
    k: int
    times: List[float] = field(default_factory=list)
    I_series: List[np.ndarray] = field(default_factory=list)
    mass_series: List[float] = field(default_factory=list)
    sup_phi_series: List[float] = field(default_factory=list)
    lipschitz_series: List[float] = field(default_factory=list)
    semiconvexity_series: List[float] = field(default_factory=list)
    min_h_eps_series: List[float] = field(default_factory=list)
    max_dphi_dt_series: List[float] = field(default_factory=list)
    dphi_dt_excess_series: List[float] = field(default_factory=list)
    snapshots: Dict[float, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    failure: Optional[Dict[str, Any]] = None

    def __len__(self) -> int:
        return len(self.times)

    @property
    def I_array(self) -> np.ndarray:
        return np.array(self.I_series).reshape(len(self.times), self.k)

    @property
    def snapshot_times(self) -> np.ndarray:
        return np.array(sorted(self.snapshots))

    def final_state(self) -> LogDensityState:
        t = max(self.snapshots)
        return LogDensityState(self.grid, self.snapshots[t], self.eps, t)

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, Any] = {"t": self.times}
        I = self.I_array
        for i in range(self.k):
            columns[f"I_{i + 1}"] = I[:, i]
        columns.update({
            "mass": self.mass_series,
            "sup_phi": self.sup_phi_series,
            "lipschitz": self.lipschitz_series,
            "semiconvexity": self.semiconvexity_series,
            "min_H_eps": self.min_h_eps_series,
            "max_dphi_dt": self.max_dphi_dt_series,
        })
        return pd.DataFrame(columns)


# ============================================================================
# SOLVER
# ============================================================================

@dataclass
class _Evaluation:
    dphi: np.ndarray
    resources: ResourceVector
    h_eps: np.ndarray


class EpsSolver:
    """Heun time stepper for phi_eps with quasi-static resources."""

    def __init__(self, config: EpsRunConfig):
        self.config = config
        x = config.grid.nodes
        self.eta = config.model.eta(x)
        self.eta_bar = config.model.eta_bar(x)
        self.sup_eta_bar = float(self.eta_bar.max())
        margin = 2.0 * config.kernel.support_radius * config.eps
        self.edge_mask = (x - config.grid.x_min <= margin) | (config.grid.x_max - x <= margin)
        self.edge_mask[[0, -1]] = True
        self.frozen = (None if config.frozen_resources is None
                       else ResourceVector(np.asarray(config.frozen_resources, dtype=float)))

    # ---------------------------------------------------------------- pieces

    def evaluate(self, state: LogDensityState) -> _Evaluation:
        cfg = self.config
        I = self.frozen if self.frozen is not None else resource_response_from_state(state, cfg.model)
        h = hamiltonian_H_eps_field(state, cfg.kernel, guard=cfg.guard)
        return _Evaluation(I.values @ self.eta - 1.0 + h, I, h)

    def auto_dt(self, state: LogDensityState, evaluation: Optional[_Evaluation] = None) -> float:
        """
        Largest stable explicit step:
        dt (sup eta_bar + 1 + sup|H'| on the Lipschitz range) <= cfl and
        dt (1 + sup H_eps) / eps <= cfl.
        """
        cfg = self.config
        lip = discrete_lipschitz(state.phi, cfg.grid.dx)
        h_prime = 0.0 if cfg.kernel.is_off else abs(hamiltonian_H_prime(cfg.kernel, lip, cfg.guard))
        evaluation = evaluation or self.evaluate(state)
        sup_h = max(float(evaluation.h_eps.max()), 0.0)
        return min(cfg.cfl / (self.sup_eta_bar + 1.0 + h_prime), cfg.cfl * cfg.eps / (1.0 + sup_h))

    def advance(self, state: LogDensityState, dt: float,
                first: Optional[_Evaluation] = None) -> Tuple[LogDensityState, _Evaluation, _Evaluation]:
        """One Heun step; returns the new state and both stage evaluations."""
        k1 = first or self.evaluate(state)
        predicted = self._finite(state.phi + dt * k1.dphi, state.t + dt, dt)
        k2 = self.evaluate(state.with_phi(predicted, state.t + dt))
        phi = self._finite(state.phi + 0.5 * dt * (k1.dphi + k2.dphi), state.t + dt, dt)
        return state.with_phi(phi, state.t + dt), k1, k2

    @staticmethod
    def _finite(phi: np.ndarray, t: float, dt: float) -> np.ndarray:
        if not np.all(np.isfinite(phi)):
            raise BlowUpError(f"non-finite phi at t={t:.6g}", time=t, diagnostics={"dt": dt})
        return phi

    def check_barrier(self, state: LogDensityState) -> None:
        edge_max = float(state.phi[self.edge_mask].max())
        if edge_max > -0.5 * self.config.phi_barrier:
            raise BlowUpError(
                f"phi reached {edge_max:.4g} near the domain boundary at t={state.t:.6g} "
                f"(barrier {-0.5 * self.config.phi_barrier:g}); widen the grid",
                time=state.t, diagnostics={"edge_max_phi": edge_max})

    # ---------------------------------------------------------------- driver

    def record(self, trace: EpsTrace, state: LogDensityState, evaluation: _Evaluation) -> None:
        dx = self.config.grid.dx
        trace.times.append(float(state.t))
        trace.I_series.append(evaluation.resources.values.copy())
        trace.mass_series.append(float(np.exp(log_mass(state))))
        trace.sup_phi_series.append(float(state.phi.max()))
        trace.lipschitz_series.append(discrete_lipschitz(state.phi, dx))
        trace.semiconvexity_series.append(discrete_semiconvexity(state.phi, dx))
        trace.min_h_eps_series.append(float(evaluation.h_eps.min()))
        speed = np.abs(evaluation.dphi)
        trace.max_dphi_dt_series.append(float(speed.max()))
        trace.dphi_dt_excess_series.append(float((speed - self.eta_bar).max()))

    def run(self) -> EpsTrace:
        cfg = self.config
        state = cfg.initial_state_for_run()
        trace = EpsTrace(cfg.eps, cfg.grid, cfg.model.k)
        outputs = cfg.output_grid()
        logger.info("eps run: eps=%g, t_end=%g, n=%d, k=%d", cfg.eps, cfg.t_end, cfg.grid.n, cfg.model.k)

        try:
            current = self.evaluate(state)
        except KernelRangeError as exc:
            raise BlowUpError(str(exc), time=state.t, diagnostics={"max_argument": exc.max_argument},
                              trace=trace) from exc
        self.record(trace, state, current)
        if outputs[0] <= 0.0:
            trace.snapshots[0.0] = state.phi.copy()
        next_out = int(np.searchsorted(outputs, 0.0, side="right"))

        if cfg.dt is not None:
            auto = self.auto_dt(state, current)
            if cfg.dt > auto * (1 + 1e-12):
                logger.warning("dt=%g exceeds the CFL step %g; the run may blow up", cfg.dt, auto)

        steps = 0
        while state.t < cfg.t_end - 1e-12 * cfg.t_end:
            if steps >= cfg.max_steps:
                raise BlowUpError(f"step limit {cfg.max_steps} reached at t={state.t:.6g}", time=state.t,
                                  trace=trace)
            dt = cfg.dt if cfg.dt is not None else self.auto_dt(state, current)
            target = outputs[next_out] if next_out < outputs.size else cfg.t_end
            hit_output = state.t + dt >= target - 1e-12 * max(target, 1.0)
            if hit_output:
                dt = target - state.t
            try:
                new_state, _, _ = self.advance(state, dt, current)
                if hit_output:
                    new_state = new_state.with_phi(new_state.phi, target)
                current = self.evaluate(new_state)
                self.check_barrier(new_state)
            except KernelRangeError as exc:
                trace.failure = {"kind": "range", "time": state.t + dt, "message": str(exc)}
                raise BlowUpError(str(exc), time=state.t + dt,
                                  diagnostics={"max_argument": exc.max_argument, "dt": dt},
                                  trace=trace) from exc
            except BlowUpError as exc:
                trace.failure = {"kind": "blow_up", "time": exc.time, "message": str(exc)}
                exc.trace = trace
                raise
            state = new_state
            steps += 1
            trace.steps = steps

            if hit_output or steps % cfg.audit_every == 0:
                self.record(trace, state, current)
            if hit_output:
                trace.snapshots[float(target)] = state.phi.copy()
                logger.debug("t=%.4g I=%s sup phi=%.4g", state.t, current.resources.to_list(), state.phi.max())
                next_out += 1

        logger.info("eps run finished: %d steps, I(T)=%s", steps, current.resources.to_list())
        return trace


def rhs(state: LogDensityState, config: EpsRunConfig) -> Tuple[np.ndarray, ResourceVector]:
    """Right-hand side sum_i I_i eta_i - 1 + H_eps(phi) and the resources used."""
    evaluation = EpsSolver(config).evaluate(state)
    return evaluation.dphi, evaluation.resources


def auto_dt(state: LogDensityState, config: EpsRunConfig) -> float:
    return EpsSolver(config).auto_dt(state)


def step(state: LogDensityState, config: EpsRunConfig, dt: Optional[float] = None) -> LogDensityState:
    """One Heun step (dt defaults to config.dt, then to the CFL step)."""
    solver = EpsSolver(config)
    if dt is None:
        dt = config.dt if config.dt is not None else solver.auto_dt(state)
    try:
        new_state, _, _ = solver.advance(state, dt)
    except KernelRangeError as exc:
        raise BlowUpError(str(exc), time=state.t + dt, diagnostics={"max_argument": exc.max_argument}) from exc
    return new_state


def run(config: EpsRunConfig) -> EpsTrace:
    return EpsSolver(config).run()


# ============================================================================
# AUDIT
# ============================================================================

@dataclass
class AuditConstants:
    """Constants of the a-priori estimates (C_T in each bound)."""
    mass: float = 10.0
    lipschitz: float = 5.0
    semiconvexity: float = 5.0
    h_eps: float = 5.0
    dphi_dt: float = 5.0
    sup_phi: float = 1.0

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.__dict__.items()}


@dataclass
class AuditCheck:
    name: str
    observed: float
    bound: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "observed": float(self.observed), "bound": float(self.bound),
                "passed": bool(self.passed)}


@dataclass
class AuditReport:
    eps: float
    checks: List[AuditCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> AuditCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {"eps": float(self.eps), "passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _extremes(trace: EpsTrace) -> Dict[str, float]:
    return {
        "mass": max(trace.mass_series),
        "lipschitz": max(trace.lipschitz_series),
        "semiconvexity": -min(trace.semiconvexity_series),
        "h_eps": -min(trace.min_h_eps_series) / trace.eps,
        "dphi_dt": max(trace.dphi_dt_excess_series),
        "sup_phi": max(trace.sup_phi_series),
    }


def audit(trace: EpsTrace, constants: Optional[AuditConstants] = None) -> AuditReport:
    """
    Check the recorded extremes against the estimate constants:
    mass <= C, Lipschitz <= C, min second difference >= -C, H_eps >= -C eps,
    |d/dt phi| <= eta_bar + C and sup phi <= C eps log(1/eps).
    A run that blew up fails the extra 'stability' check.
    """
    if not trace.times:
        raise InvalidInputError("audit needs a nonempty trace")
    c = constants or AuditConstants()
    obs = _extremes(trace)
    sup_phi_bound = c.sup_phi * trace.eps * np.log(1.0 / trace.eps) if trace.eps < 1 else 0.0
    report = AuditReport(trace.eps, [
        AuditCheck("mass", obs["mass"], c.mass, obs["mass"] <= c.mass),
        AuditCheck("lipschitz", obs["lipschitz"], c.lipschitz, obs["lipschitz"] <= c.lipschitz),
        AuditCheck("semiconvexity", -obs["semiconvexity"], -c.semiconvexity, obs["semiconvexity"] <= c.semiconvexity),
        AuditCheck("h_eps_lower", -obs["h_eps"] * trace.eps, -c.h_eps * trace.eps, obs["h_eps"] <= c.h_eps),
        AuditCheck("dphi_dt", obs["dphi_dt"], c.dphi_dt, obs["dphi_dt"] <= c.dphi_dt),
        AuditCheck("sup_phi", obs["sup_phi"], sup_phi_bound, obs["sup_phi"] <= sup_phi_bound + 1e-12),
        AuditCheck("stability", 0.0 if trace.failure is None else 1.0, 0.0, trace.failure is None),
    ])
    for check in report.checks:
        if not check.passed:
            logger.warning("audit eps=%g: %s observed %.6g vs bound %.6g",
                           trace.eps, check.name, check.observed, check.bound)
    return report


def fit_audit_constants(trace: EpsTrace, slack: float = 2.0, floor: float = 1e-6,
                        sup_phi_floor: float = 1.0) -> AuditConstants:
    """
    Fit the estimate constants on one (coarse-eps) trace, inflated by slack.

    The sup phi constant is the observed sup phi / (eps log(1/eps)) times
    slack, never below sup_phi_floor.
    """
    obs = _extremes(trace)
    sup_phi = sup_phi_floor
    if trace.eps < 1:
        ratio = obs["sup_phi"] / (trace.eps * np.log(1.0 / trace.eps))
        sup_phi = max(max(ratio, floor) * slack, sup_phi_floor)
    return AuditConstants(
        mass=max(obs["mass"], floor) * slack,
        lipschitz=max(obs["lipschitz"], floor) * slack,
        semiconvexity=max(obs["semiconvexity"], floor) * slack,
        h_eps=max(obs["h_eps"], floor) * slack,
        dphi_dt=max(obs["dphi_dt"], floor) * slack,
        sup_phi=sup_phi,
    )
