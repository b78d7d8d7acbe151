"""
Limit Solver - the constrained Hamilton-Jacobi dynamics

    d/dt phi = H(d/dx phi) + sum_i I_i eta_i - 1,   max phi = 0,

with I_i closed by the metastable measure of the numerical zero set
{phi >= -band}, plus the psi-form cross-check driven by a recorded I series.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidInputError, MetastableConvergenceError, ScenarioError
from ..metastable import EquilibriumCertificate, FeasibleSet, MetastableOptions, minimize_entropy
from ..trait_model import (
    EXPONENT_GUARD, DiscreteMeasure, LogDensityState, MutationKernel, ResourceModel,
    ResourceVector, TraitGrid, discrete_lipschitz, hamiltonian_H, hamiltonian_H_prime,
)
from .eps_solver import InitialProfile, initial_profile

logger = logging.getLogger(__name__)

DISSIPATION_MODES = ("local", "global")


# ============================================================================
# CONFIG / TRACE
# ============================================================================

@dataclass
class LimitRunConfig:
    grid: TraitGrid
    kernel: MutationKernel
    model: ResourceModel
    t_end: float
    initial: InitialProfile = field(default_factory=InitialProfile)
    initial_state: Optional[LogDensityState] = None
    dt: Optional[float] = None
    cfl: float = 0.5
    zero_band: Optional[float] = None
    band_factor: float = 10.0
    dissipation: str = "local"
    lf_lambda: Optional[float] = None
    n_outputs: int = 10
    output_times: Optional[Sequence[float]] = None
    metastable: MetastableOptions = field(default_factory=MetastableOptions)
    closure: bool = True
    frozen_resources: Optional[Sequence[float]] = None
    phi_barrier: float = 8.0
    guard: float = EXPONENT_GUARD
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not self.t_end > 0:
            raise InvalidInputError(f"t_end must be positive, got {self.t_end}")
        if not 0 < self.cfl <= 1:
            raise InvalidInputError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.dt is not None and not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if self.dissipation not in DISSIPATION_MODES:
            raise InvalidInputError(f"dissipation must be one of {DISSIPATION_MODES}, got {self.dissipation}")
        if self.zero_band is not None and not self.zero_band >= 0:
            raise InvalidInputError("zero_band must be nonnegative")
        if not self.closure and (self.frozen_resources is None or len(self.frozen_resources) != self.model.k):
            raise InvalidInputError("a run without closure needs frozen_resources with one value per resource")

    def output_grid(self) -> np.ndarray:
        if self.output_times is not None:
            return np.unique(np.clip(np.asarray(self.output_times, dtype=float), 0.0, self.t_end))
        return np.linspace(0.0, self.t_end, max(self.n_outputs, 1) + 1)

    def initial_state_for_run(self) -> LogDensityState:
        if self.initial_state is not None:
            return LogDensityState(self.grid, self.initial_state.phi, 0.0, self.initial_state.t)
        return initial_profile(self.initial.name, self.initial.params, self.grid, 0.0, self.phi_barrier)


@dataclass
class LimitTrace:
    """Output-time records of a limit run plus the per-step resource history."""
    grid: TraitGrid
    k: int
    times: List[float] = field(default_factory=list)
    I_series: List[np.ndarray] = field(default_factory=list)
    measure_series: List[DiscreteMeasure] = field(default_factory=list)
    certificates: List[EquilibriumCertificate] = field(default_factory=list)
    atom_counts: List[int] = field(default_factory=list)
    snapshots: Dict[float, np.ndarray] = field(default_factory=dict)
    psi_snapshots: Dict[float, np.ndarray] = field(default_factory=dict)
    step_times: List[float] = field(default_factory=list)
    step_I: List[np.ndarray] = field(default_factory=list)
    step_atom_counts: List[int] = field(default_factory=list)
    inactive_intervals: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def I_array(self) -> np.ndarray:
        return np.array(self.I_series).reshape(len(self.times), self.k)

    @property
    def step_I_array(self) -> np.ndarray:
        return np.array(self.step_I).reshape(len(self.step_I), self.k)

    def final_state(self) -> LogDensityState:
        t = max(self.snapshots)
        return LogDensityState(self.grid, self.snapshots[t], 0.0, t)

    def resources_at(self, t: float) -> np.ndarray:
        """Right-continuous piecewise-constant I(t) from the step history."""
        starts = np.asarray(self.step_times[:-1])
        if starts.size == 0:
            return self.I_array[-1]
        n = int(np.searchsorted(starts, t, side="right")) - 1
        return self.step_I_array[min(max(n, 0), starts.size - 1)]

    def cumulative_resources(self) -> np.ndarray:
        """J_i(t_n) = int_0^{t_n} I_i ds at every step time, shape (len(step_times), k)."""
        dts = np.diff(np.asarray(self.step_times))
        J = np.zeros((len(self.step_times), self.k))
        if dts.size:
            J[1:] = np.cumsum(self.step_I_array * dts[:, None], axis=0)
        return J


@dataclass
class PsiResult:
    times: np.ndarray
    psi: Dict[float, np.ndarray]
    phi_reconstructed: Dict[float, np.ndarray]
    max_gap: float
    gaps: Dict[float, float]

    def to_dict(self) -> Dict[str, Any]:
        return {"max_gap": float(self.max_gap),
                "gaps": [{"t": float(t), "gap": float(g)} for t, g in sorted(self.gaps.items())]}


# ============================================================================
# SCHEME PIECES
# ============================================================================

def zero_set(state: LogDensityState, band: float) -> FeasibleSet:
    """Numerical zero set {phi >= -band}; may be empty."""
    return FeasibleSet(state.grid, np.asarray(state.phi) >= -band)


def numerical_hamiltonian(p_minus, p_plus, kernel: MutationKernel, lam):
    """
    Lax-Friedrichs flux H((p- + p+)/2) + (lam/2)(p+ - p-).

    Nondecreasing in p+ and nonincreasing in p- whenever lam >= sup|H'| on
    the range of the two slopes.
    """
    p_minus = np.asarray(p_minus, dtype=float)
    p_plus = np.asarray(p_plus, dtype=float)
    flux = hamiltonian_H(kernel, 0.5 * (p_minus + p_plus)) + 0.5 * np.asarray(lam) * (p_plus - p_minus)
    return float(flux) if np.ndim(flux) == 0 else flux


def one_sided_slopes(phi: np.ndarray, dx: float) -> Tuple[np.ndarray, np.ndarray]:
    """Backward / forward differences with linearly extrapolated ghost nodes."""
    d = np.diff(phi) / dx
    p_minus = np.concatenate(([d[0]], d))
    p_plus = np.concatenate((d, [d[-1]]))
    return p_minus, p_plus


def dissipation_coefficient(p_minus: np.ndarray, p_plus: np.ndarray, kernel: MutationKernel,
                            mode: str = "global", guard: float = EXPONENT_GUARD) -> np.ndarray:
    """
    sup|H'| over the slopes: per node (local) or over the whole grid (global).

    H' is increasing, so the sup over an interval of slopes sits at an end.
    """
    if kernel.is_off:
        return np.zeros_like(p_minus)
    local = np.maximum(np.abs(hamiltonian_H_prime(kernel, p_minus, guard)),
                       np.abs(hamiltonian_H_prime(kernel, p_plus, guard)))
    if mode == "local":
        return local
    return np.full_like(local, local.max())


def plain_hj_step(phi: np.ndarray, grid: TraitGrid, kernel: MutationKernel, growth: np.ndarray,
                  dt: float, lam: Optional[float] = None, dissipation: str = "global",
                  guard: float = EXPONENT_GUARD) -> np.ndarray:
    """phi + dt * (flux + growth), no closure and no clamping."""
    p_minus, p_plus = one_sided_slopes(phi, grid.dx)
    if lam is None:
        lam_field = dissipation_coefficient(p_minus, p_plus, kernel, dissipation, guard)
    else:
        lam_field = np.full(grid.n, float(lam))
    return phi + dt * (numerical_hamiltonian(p_minus, p_plus, kernel, lam_field) + growth)


# ============================================================================
# SOLVER
# ============================================================================

class LimitSolver:
    """Closure-then-transport time stepping of the constrained HJ equation."""

    def __init__(self, config: LimitRunConfig):
        self.config = config
        x = config.grid.nodes
        self.eta = config.model.eta(x)
        self.sup_eta_bar = float(config.model.eta_bar(x).max())
        self.frozen = (None if config.frozen_resources is None
                       else ResourceVector(np.asarray(config.frozen_resources, dtype=float)))
        # stands in for the closure when it is disabled: no atoms, frozen I
        self.frozen_certificate = (None if self.frozen is None else EquilibriumCertificate(
            measure=DiscreteMeasure.empty(), resources=self.frozen, max_violation_on_omega=float("-inf"),
            max_residual_on_support=0.0, entropy_value=0.0, cert_tol=config.metastable.cert_tol))

    def band(self, state: LogDensityState) -> float:
        cfg = self.config
        if cfg.zero_band is not None:
            return cfg.zero_band
        return cfg.band_factor * cfg.grid.dx * discrete_lipschitz(state.phi, cfg.grid.dx)

    def closure(self, state: LogDensityState,
                warm: Optional[DiscreteMeasure] = None) -> EquilibriumCertificate:
        """Metastable measure of the current zero set (right-continuous convention)."""
        omega = zero_set(state, self.band(state))
        try:
            return minimize_entropy(omega, self.config.model, self.config.metastable, initial=warm)
        except MetastableConvergenceError as exc:
            raise exc.with_time(state.t) from exc

    def lambda_field(self, phi: np.ndarray) -> np.ndarray:
        cfg = self.config
        p_minus, p_plus = one_sided_slopes(phi, cfg.grid.dx)
        required = dissipation_coefficient(p_minus, p_plus, cfg.kernel, cfg.dissipation, cfg.guard)
        if cfg.lf_lambda is None:
            return required
        if cfg.lf_lambda < required.max() * (1 - 1e-12):
            logger.warning("lf_lambda=%g is below sup|H'|=%g; the scheme may lose monotonicity",
                           cfg.lf_lambda, required.max())
        return np.full(cfg.grid.n, float(cfg.lf_lambda))

    def auto_dt(self, phi: np.ndarray) -> float:
        """dt (lambda/dx + sup eta_bar + 1) <= cfl."""
        lam = float(self.lambda_field(phi).max())
        return self.config.cfl / (lam / self.config.grid.dx + self.sup_eta_bar + 1.0)

    def transport(self, state: LogDensityState, resources: ResourceVector, dt: float) -> LogDensityState:
        cfg = self.config
        growth = resources.values @ self.eta - 1.0
        phi = state.phi
        p_minus, p_plus = one_sided_slopes(phi, cfg.grid.dx)
        flux = numerical_hamiltonian(p_minus, p_plus, cfg.kernel, self.lambda_field(phi))
        new_phi = np.minimum(phi + dt * (flux + growth), 0.0)
        return state.with_phi(new_phi, state.t + dt)

    def step(self, state: LogDensityState, dt: Optional[float] = None,
             warm: Optional[DiscreteMeasure] = None
             ) -> Tuple[LogDensityState, ResourceVector, EquilibriumCertificate]:
        """Closure from the current state, then one explicit transport step with clamping."""
        if self.config.closure:
            cert = self.closure(state, warm)
            resources = cert.resources
        else:
            cert = None
            resources = self.frozen
        if dt is None:
            dt = self.config.dt if self.config.dt is not None else self.auto_dt(state.phi)
        return self.transport(state, resources, dt), resources, cert

    def run(self) -> LimitTrace:
        cfg = self.config
        state = cfg.initial_state_for_run()
        trace = LimitTrace(cfg.grid, cfg.model.k)
        outputs = cfg.output_grid()
        logger.info("limit run: t_end=%g, n=%d, k=%d, dissipation=%s",
                    cfg.t_end, cfg.grid.n, cfg.model.k, cfg.dissipation)

        cert = self.closure(state) if cfg.closure else self.frozen_certificate
        inactive_since: Optional[float] = state.t if cfg.closure and cert.measure.is_empty() else None
        if outputs[0] <= 0.0:
            self._record(trace, state, cert, self._resources(cert))
        next_out = int(np.searchsorted(outputs, 0.0, side="right"))
        trace.step_times.append(float(state.t))

        steps = 0
        while state.t < cfg.t_end - 1e-12 * cfg.t_end:
            if steps >= cfg.max_steps:
                raise InvalidInputError(f"step limit {cfg.max_steps} reached at t={state.t:.6g}")
            dt = cfg.dt if cfg.dt is not None else self.auto_dt(state.phi)
            target = outputs[next_out] if next_out < outputs.size else cfg.t_end
            hit_output = state.t + dt >= target - 1e-12 * max(target, 1.0)
            if hit_output:
                dt = target - state.t

            resources = self._resources(cert)
            new_state = self.transport(state, resources, dt)
            if hit_output:
                new_state = new_state.with_phi(new_state.phi, target)
            trace.step_I.append(resources.values.copy())
            trace.step_atom_counts.append(cert.atom_count)
            trace.step_times.append(float(new_state.t))
            state = new_state
            steps += 1

            if cfg.closure:
                cert = self.closure(state, warm=cert.measure)
                empty = cert.measure.is_empty()
                if empty and inactive_since is None:
                    inactive_since = state.t
                elif not empty and inactive_since is not None:
                    trace.inactive_intervals.append((inactive_since, float(state.t)))
                    logger.info("constraint active from t=%.4g", state.t)
                    inactive_since = None

            if hit_output:
                self._record(trace, state, cert, self._resources(cert))
                next_out += 1

        if inactive_since is not None:
            trace.inactive_intervals.append((inactive_since, float(state.t)))
        logger.info("limit run finished: %d steps, I(T)=%s, %d atoms",
                    steps, cert.resources.to_list(), cert.atom_count)
        return trace

    def _resources(self, cert: EquilibriumCertificate) -> ResourceVector:
        return cert.resources if self.config.closure else self.frozen

    @staticmethod
    def _record(trace: LimitTrace, state: LogDensityState, cert: EquilibriumCertificate,
                resources: ResourceVector) -> None:
        t = float(state.t)
        trace.times.append(t)
        trace.I_series.append(resources.values.copy())
        trace.measure_series.append(cert.measure)
        trace.certificates.append(cert)
        trace.atom_counts.append(cert.atom_count)
        trace.snapshots[t] = state.phi.copy()
        logger.debug("t=%.4g I=%s atoms=%d", t, cert.resources.to_list(), cert.atom_count)


def limit_step(state: LogDensityState, config: LimitRunConfig, dt: Optional[float] = None,
               warm: Optional[DiscreteMeasure] = None
               ) -> Tuple[LogDensityState, ResourceVector, DiscreteMeasure]:
    new_state, resources, cert = LimitSolver(config).step(state, dt, warm)
    measure = cert.measure if cert is not None else DiscreteMeasure.empty()
    return new_state, resources, measure


def solve_limit(config: LimitRunConfig) -> LimitTrace:
    return LimitSolver(config).run()


# ============================================================================
# PSI CROSS-CHECK
# ============================================================================

def psi_solve(config: LimitRunConfig, trace: LimitTrace,
              window: Optional[Tuple[float, float]] = None) -> PsiResult:
    """
    Solve d/dt psi = H(d/dx psi + sum_i J_i(t) eta_i') with J_i = int_0^t I_i,
    psi = phi - sum_i J_i eta_i + t, on the recorded step times, then rebuild
    phi = psi + sum_i J_i eta_i - t and compare with the direct snapshots.
    The psi fields at the snapshot times are also stored on trace.psi_snapshots.

    eta_i' is taken at the cell interfaces x_j +- dx/2.
    """
    grid = config.grid
    if trace.grid != grid:
        raise ScenarioError("psi_solve: trace grid differs from the run grid")
    if len(trace.step_times) != len(trace.step_I) + 1 or not trace.step_I:
        raise ScenarioError("psi_solve: step times and resource series are misaligned")
    if trace.k != config.model.k:
        raise ScenarioError("psi_solve: resource count differs between trace and model")

    step_times = np.asarray(trace.step_times)
    J = trace.cumulative_resources()
    x = grid.nodes
    dx = grid.dx
    interfaces = np.concatenate(([x[0] - 0.5 * dx], x + 0.5 * dx))
    eta_prime_if = config.model.eta_prime(interfaces)            # (k, n + 1)
    eta_nodes = config.model.eta(x)

    phi0 = trace.snapshots.get(float(step_times[0]))
    if phi0 is None:
        phi0 = config.initial_state_for_run().phi
    psi = np.array(phi0, dtype=float)
    wanted = set(trace.snapshots)
    psi_out: Dict[float, np.ndarray] = {}
    phi_out: Dict[float, np.ndarray] = {}

    def store(n: int) -> None:
        t = float(step_times[n])
        if t in wanted:
            psi_out[t] = psi.copy()
            phi_out[t] = psi + J[n] @ eta_nodes - t

    store(0)
    for n in range(len(trace.step_I)):
        dt = step_times[n + 1] - step_times[n]
        shift = J[n] @ eta_prime_if
        p_minus, p_plus = one_sided_slopes(psi, dx)
        q_minus, q_plus = p_minus + shift[:-1], p_plus + shift[1:]
        lam = dissipation_coefficient(q_minus, q_plus, config.kernel, config.dissipation, config.guard)
        if config.lf_lambda is not None:
            lam = np.full(grid.n, float(config.lf_lambda))
        psi = psi + dt * numerical_hamiltonian(q_minus, q_plus, config.kernel, lam)
        store(n + 1)

    if window is None:
        inside = np.ones(grid.n, dtype=bool)
    else:
        inside = (x >= window[0]) & (x <= window[1])
    gaps = {t: float(np.max(np.abs(phi_out[t][inside] - trace.snapshots[t][inside]))) for t in phi_out}
    trace.psi_snapshots.update(psi_out)
    return PsiResult(np.array(sorted(psi_out)), psi_out, phi_out, max(gaps.values()) if gaps else 0.0, gaps)
