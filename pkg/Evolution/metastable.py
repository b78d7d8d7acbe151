"""
Metastable measure - the unique nonnegative measure mu(omega) on a closed set
omega whose resources make growth <= 0 on omega and = 0 on supp mu.

Two independent routes compute it:
- minimize_entropy: fully-corrective conditional gradient on node weights
  (restricted L-BFGS-B solve, prune, add the node of largest growth);
- integrate_replicator: the replicator flow with the positivity-preserving
  exponential update, which dissipates the entropy L.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import brentq, minimize

from .errors import InvalidInputError, MetastableConvergenceError
from .trait_model import DiscreteMeasure, ResourceModel, ResourceVector, TraitGrid

logger = logging.getLogger(__name__)


# ============================================================================
# FEASIBLE SET / OPTIONS
# ============================================================================

@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Closed set omega, stored as a boolean mask over the grid nodes."""
    grid: TraitGrid
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.grid.n,):
            raise InvalidInputError(f"feasible-set mask has shape {mask.shape}, grid has {self.grid.n} nodes")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, grid: TraitGrid) -> "FeasibleSet":
        return cls(grid, np.zeros(grid.n, dtype=bool))

    @classmethod
    def full(cls, grid: TraitGrid) -> "FeasibleSet":
        return cls(grid, np.ones(grid.n, dtype=bool))

    @classmethod
    def from_interval(cls, grid: TraitGrid, lo: float, hi: float) -> "FeasibleSet":
        x = grid.nodes
        slack = 1e-9 * grid.dx
        return cls(grid, (x >= lo - slack) & (x <= hi + slack))

    @classmethod
    def from_indices(cls, grid: TraitGrid, indices) -> "FeasibleSet":
        mask = np.zeros(grid.n, dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = True
        return cls(grid, mask)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def is_empty(self) -> bool:
        return self.size == 0

    def nodes(self) -> np.ndarray:
        return self.grid.nodes[self.mask]

    def intervals(self) -> List[Tuple[int, int]]:
        """Maximal runs of consecutive node indices, as inclusive (first, last) pairs."""
        idx = self.indices
        if idx.size == 0:
            return []
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate(([idx[0]], idx[breaks + 1]))
        ends = np.concatenate((idx[breaks], [idx[-1]]))
        return [(int(a), int(b)) for a, b in zip(starts, ends)]

    def contains(self, x: float) -> bool:
        """True if x lies within half a cell of a node of omega."""
        g = self.grid
        if x < g.x_min - 0.5 * g.dx or x > g.x_max + 0.5 * g.dx:
            return False
        return bool(self.mask[g.node_index(x)])


@dataclass
class MetastableOptions:
    cert_tol: float = 1e-6
    prune_tol: float = 1e-10
    stationarity_tol: float = 1e-9
    max_iters: int = 200
    inner_max_iters: int = 500
    merge_cells: float = 2.0
    k_bar: Optional[int] = None
    mass_cap: Optional[float] = None
    # replicator flow
    replicator_dt: float = 0.5
    replicator_max_dt: float = 50.0
    replicator_min_dt: float = 1e-12
    replicator_max_steps: int = 20000
    merge_every: int = 20
    invade_mass: float = 1e-3

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


# ============================================================================
# CERTIFICATE
# ============================================================================

@dataclass
class EquilibriumCertificate:
    measure: DiscreteMeasure
    resources: ResourceVector
    max_violation_on_omega: float
    max_residual_on_support: float
    entropy_value: float
    cert_tol: float = 1e-6
    merge_distance: float = 0.0
    k_bar: Optional[int] = None
    degenerate: bool = False
    iterations: int = 0

    @property
    def passed(self) -> bool:
        return (self.max_violation_on_omega <= self.cert_tol
                and self.max_residual_on_support <= self.cert_tol)

    @property
    def atom_count(self) -> int:
        """Atoms after merging clusters closer than merge_distance."""
        return merge_close_atoms(self.measure, self.merge_distance).n_atoms

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "degenerate": self.degenerate,
            "atom_count": self.atom_count,
            "measure": self.measure.to_dict()["atoms"],
            "resources": self.resources.to_list(),
            "max_violation_on_omega": float(self.max_violation_on_omega),
            "max_residual_on_support": float(self.max_residual_on_support),
            "entropy": float(self.entropy_value),
            "cert_tol": float(self.cert_tol),
            "iterations": int(self.iterations),
        }


@dataclass
class ReplicatorResult:
    certificate: EquilibriumCertificate
    node_weights: np.ndarray
    entropy_history: np.ndarray
    flow_times: np.ndarray
    steps: int
    merges: int = 0
    invasions: int = 0


# ============================================================================
# BASIC FUNCTIONALS
# ============================================================================

def bar_resources(mu: DiscreteMeasure, model: ResourceModel) -> ResourceVector:
    """I_i(mu) = 1 / (1 + sum_l alpha_l eta_i(x_l))."""
    if mu.is_empty():
        return ResourceVector(np.ones(model.k))
    return ResourceVector(1.0 / (1.0 + model.eta(mu.locations) @ mu.weights))


def _as_node_weights(nu: np.ndarray, grid: TraitGrid) -> np.ndarray:
    nu = grid.check_field(nu, "node weights")
    if not np.all(np.isfinite(nu)) or np.any(nu < 0):
        raise InvalidInputError("node weights must be finite and nonnegative")
    return nu


def entropy(nu: Union[DiscreteMeasure, np.ndarray], model: ResourceModel,
            grid: Optional[TraitGrid] = None) -> float:
    """
    L(nu) = -sum_i log(1 + int eta_i dnu) + int dnu.

    nu is a DiscreteMeasure or a node-weight field (atom mass per grid node,
    not a density), the latter needing its grid.
    """
    if isinstance(nu, DiscreteMeasure):
        if nu.is_empty():
            return 0.0
        integrals = model.eta(nu.locations) @ nu.weights
        return float(-np.sum(np.log1p(integrals)) + nu.weights.sum())
    if grid is None:
        raise InvalidInputError("entropy of a node-weight field needs its grid")
    nu = _as_node_weights(nu, grid)
    support = nu > 0
    integrals = model.eta(grid.nodes[support]) @ nu[support]
    return float(-np.sum(np.log1p(integrals)) + nu[support].sum())


def growth_on_nodes(I: ResourceVector, eta: np.ndarray) -> np.ndarray:
    """sum_i I_i eta_i(x_j) - 1 for a precomputed (k, m) eta matrix."""
    return I.values @ eta - 1.0


def replicator_step(nu: np.ndarray, model: ResourceModel, dt: float, grid: TraitGrid) -> np.ndarray:
    """One exponential step nu <- nu * exp(dt * growth(I(nu))); positivity is unconditional."""
    if not dt > 0:
        raise InvalidInputError(f"replicator dt must be positive, got {dt}")
    nu = _as_node_weights(nu, grid)
    support = nu > 0
    out = nu.copy()
    if not support.any():
        return out
    x = grid.nodes[support]
    eta = model.eta(x)
    I = ResourceVector(1.0 / (1.0 + eta @ nu[support]))
    out[support] = nu[support] * np.exp(dt * growth_on_nodes(I, eta))
    return out


def merge_close_atoms(mu: DiscreteMeasure, distance: float) -> DiscreteMeasure:
    """Merge chains of atoms with gaps <= distance into their mass-weighted centroid."""
    if mu.n_atoms < 2 or distance <= 0:
        return mu
    groups: List[List[int]] = [[0]]
    for l in range(1, mu.n_atoms):
        if mu.locations[l] - mu.locations[l - 1] <= distance * (1 + 1e-12):
            groups[-1].append(l)
        else:
            groups.append([l])
    locations, weights = [], []
    for group in groups:
        w = mu.weights[group]
        x = mu.locations[group]
        total = float(w.sum())
        locations.append(float(np.dot(w, x) / total) if total > 0 else float(x.mean()))
        weights.append(total)
    return DiscreteMeasure(np.array(locations), np.array(weights))


def coercivity_bound(model: ResourceModel, omega: FeasibleSet, level: float = 0.0) -> float:
    """
    Largest total mass M compatible with L <= level.

    With eta_max the largest eta_i on omega, L(nu) >= M - k log(1 + eta_max M),
    so every nu with L(nu) <= level has mass at most the largest root of
    M - k log(1 + eta_max M) = level.
    """
    if omega.is_empty():
        return 0.0
    eta_max = float(model.eta(omega.nodes()).max())
    k = model.k

    def excess(m):
        return m - k * np.log1p(eta_max * m) - level

    lo = max(k - 1.0 / eta_max, 0.0)
    if excess(lo) > 0:
        return 0.0
    hi = max(2.0 * lo, 1.0)
    while excess(hi) <= 0:
        hi *= 2.0
    return float(brentq(excess, lo, hi, xtol=1e-12))


# ============================================================================
# CERTIFICATION
# ============================================================================

def certify(mu: DiscreteMeasure, omega: FeasibleSet, model: ResourceModel,
            cert_tol: float = 1e-6, k_bar: Optional[int] = None,
            merge_cells: float = 2.0, iterations: int = 0) -> EquilibriumCertificate:
    """Evaluate both parts of the equilibrium condition on the grid."""
    for x in mu.locations:
        if not omega.contains(float(x)):
            raise InvalidInputError(f"atom at x={x:.6g} lies outside the feasible set")
    I = bar_resources(mu, model)
    if omega.is_empty():
        violation = float("-inf")
    else:
        violation = float(growth_on_nodes(I, model.eta(omega.nodes())).max())
    residual = 0.0
    if not mu.is_empty():
        residual = float(np.max(np.abs(growth_on_nodes(I, model.eta(mu.locations)))))

    k_bar = model.k if k_bar is None else int(k_bar)
    merge_distance = merge_cells * omega.grid.dx
    merged = merge_close_atoms(mu, merge_distance)
    degenerate = merged.n_atoms > k_bar
    if not degenerate and 0 < merged.n_atoms <= model.k:
        degenerate = np.linalg.matrix_rank(model.eta(merged.locations)) < merged.n_atoms

    return EquilibriumCertificate(
        measure=mu,
        resources=I,
        max_violation_on_omega=violation,
        max_residual_on_support=residual,
        entropy_value=entropy(mu, model),
        cert_tol=cert_tol,
        merge_distance=merge_distance,
        k_bar=k_bar,
        degenerate=bool(degenerate),
        iterations=iterations,
    )


# ============================================================================
# ENTROPY MINIMIZATION (fully-corrective conditional gradient)
# ============================================================================

def _restricted_objective(w: np.ndarray, eta_active: np.ndarray) -> Tuple[float, np.ndarray]:
    integrals = eta_active @ w
    I = 1.0 / (1.0 + integrals)
    value = -np.sum(np.log1p(integrals)) + w.sum()
    grad = 1.0 - I @ eta_active
    return float(value), grad


def _solve_restricted(eta_active: np.ndarray, w0: np.ndarray, opts: MetastableOptions) -> np.ndarray:
    result = minimize(
        _restricted_objective, w0, args=(eta_active,), jac=True, method="L-BFGS-B",
        bounds=[(0.0, None)] * w0.size,
        options={"maxiter": opts.inner_max_iters, "gtol": 1e-14, "ftol": 0.0},
    )
    return np.clip(result.x, 0.0, None)


def _polish_weights(eta_active: np.ndarray, w: np.ndarray, steps: int = 5) -> np.ndarray:
    """Damped Newton on sum_i I_i eta_i(x_l) = 1 over the active atoms, keeping w >= 0."""
    for _ in range(steps):
        I = 1.0 / (1.0 + eta_active @ w)
        residual = I @ eta_active - 1.0
        jac = -(eta_active * I[:, None] ** 2).T @ eta_active
        delta = np.linalg.lstsq(jac, -residual, rcond=None)[0]
        t = 1.0
        while np.any(w + t * delta < 0) and t > 1e-4:
            t *= 0.5
        w = np.clip(w + t * delta, 0.0, None)
    return w


def _initial_active_set(omega: FeasibleSet, initial: Optional[Union[DiscreteMeasure, np.ndarray]]
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """Map a warm start onto positions within omega.indices."""
    idx = omega.indices
    if initial is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    position = {int(j): p for p, j in enumerate(idx)}
    weights: Dict[int, float] = {}
    if isinstance(initial, DiscreteMeasure):
        pairs = [(omega.grid.node_index(float(x)), float(a)) for x, a in zip(initial.locations, initial.weights)]
    else:
        nu = _as_node_weights(initial, omega.grid)
        pairs = [(int(j), float(nu[j])) for j in np.flatnonzero(nu > 0)]
    for j, a in pairs:
        if j in position and a > 0:
            weights[position[j]] = weights.get(position[j], 0.0) + a
    active = np.array(sorted(weights), dtype=np.int64)
    return active, np.array([weights[p] for p in active])


def minimize_entropy(omega: FeasibleSet, model: ResourceModel,
                     opts: Optional[MetastableOptions] = None,
                     initial: Optional[Union[DiscreteMeasure, np.ndarray]] = None) -> EquilibriumCertificate:
    """
    Minimize L over nonnegative node weights supported in omega.

    Active-set conditional gradient: solve L restricted to the active nodes,
    drop atoms below prune_tol, then activate the node with the largest
    growth while it is positive. An optional warm start (measure or node
    weights) seeds the active set. When the node of largest growth is already
    active, the active weights get a Newton polish instead, and a polished
    iterate within cert_tol is accepted.
    """
    opts = opts or MetastableOptions()
    grid = omega.grid
    if omega.is_empty():
        return certify(DiscreteMeasure.empty(), omega, model, opts.cert_tol, opts.k_bar, opts.merge_cells)

    idx = omega.indices
    eta = model.eta(grid.nodes[idx])
    active, w = _initial_active_set(omega, initial)
    mass_cap = opts.mass_cap if opts.mass_cap is not None else coercivity_bound(model, omega)

    best = DiscreteMeasure.empty()
    violation = residual = float("inf")
    polished = False
    for it in range(1, opts.max_iters + 1):
        if active.size and not polished:
            w = _solve_restricted(eta[:, active], w, opts)
            keep = w > opts.prune_tol
            active, w = active[keep], w[keep]

        integrals = eta[:, active] @ w if active.size else np.zeros(model.k)
        I = ResourceVector(1.0 / (1.0 + integrals))
        g = growth_on_nodes(I, eta)
        residual = float(np.max(np.abs(g[active]))) if active.size else 0.0
        j = int(np.argmax(g))
        violation = float(g[j])

        order = np.argsort(active)
        best = DiscreteMeasure(grid.nodes[idx[active[order]]], w[order])
        if best.total_mass > mass_cap * (1 + 1e-9) + 1e-12:
            raise MetastableConvergenceError(
                f"iterate mass {best.total_mass:.6g} exceeds the coercivity bound {mass_cap:.6g}",
                best=best, residuals={"mass": best.total_mass, "mass_cap": mass_cap})

        if violation <= opts.stationarity_tol and residual <= opts.stationarity_tol:
            logger.debug("entropy minimizer converged in %d iterations (%d atoms)", it, best.n_atoms)
            return certify(best, omega, model, opts.cert_tol, opts.k_bar, opts.merge_cells, iterations=it)
        if violation > opts.stationarity_tol and j not in set(active.tolist()):
            active = np.append(active, j)
            w = np.append(w, 0.0)
            polished = False
            continue

        # the restricted solve stalls once the largest growth sits on the support
        if polished and max(violation, residual) <= opts.cert_tol:
            logger.debug("entropy minimizer accepted after polishing at iteration %d (residual %.3g)",
                         it, max(violation, residual))
            return certify(best, omega, model, opts.cert_tol, opts.k_bar, opts.merge_cells, iterations=it)
        if polished:
            polished = False
            continue
        w = _polish_weights(eta[:, active], w)
        polished = True

    raise MetastableConvergenceError(
        f"entropy minimizer did not converge in {opts.max_iters} iterations",
        best=best, residuals={"max_violation_on_omega": violation, "max_residual_on_support": residual})


# ============================================================================
# REPLICATOR FLOW
# ============================================================================

def _growth_basins(g: np.ndarray, idx: np.ndarray) -> List[np.ndarray]:
    """Split positions of omega into watershed basins of g (split at local minima and gaps)."""
    basins: List[np.ndarray] = []
    start = 0
    m = g.size
    for p in range(1, m):
        gap = idx[p] - idx[p - 1] > 1
        valley = p + 1 < m and g[p] < g[p - 1] and g[p] <= g[p + 1] and idx[p + 1] - idx[p] == 1
        if gap:
            basins.append(np.arange(start, p))
            start = p
        elif valley:
            basins.append(np.arange(start, p + 1))
            start = p + 1
    if start < m:
        basins.append(np.arange(start, m))
    return [b for b in basins if b.size]


def integrate_replicator(omega: FeasibleSet, model: ResourceModel,
                         opts: Optional[MetastableOptions] = None,
                         nu0: Optional[np.ndarray] = None) -> ReplicatorResult:
    """
    Integrate the replicator flow d nu/dt = (sum_i I_i(nu) eta_i - 1) nu on omega.

    Steps are accepted only when L does not increase (dt halves otherwise).
    Every merge_every steps the mass of each growth basin is moved onto the
    basin's best node, and nodes of omega with positive growth are invaded
    with a small mass; both moves are kept only if they lower L.
    """
    opts = opts or MetastableOptions()
    grid = omega.grid
    idx = omega.indices
    if omega.is_empty():
        cert = certify(DiscreteMeasure.empty(), omega, model, opts.cert_tol, opts.k_bar, opts.merge_cells)
        return ReplicatorResult(cert, np.zeros(grid.n), np.array([0.0]), np.array([0.0]), 0)

    eta = model.eta(grid.nodes[idx])
    if nu0 is None:
        nu = np.full(idx.size, 1.0 / idx.size)
    else:
        nu = _as_node_weights(nu0, grid)[idx].copy()
        if not np.any(nu > 0):
            raise InvalidInputError("replicator start has no mass on the feasible set")

    def objective(v: np.ndarray) -> float:
        integrals = eta @ v
        return float(-np.sum(np.log1p(integrals)) + v.sum())

    def growth(v: np.ndarray) -> np.ndarray:
        return growth_on_nodes(ResourceVector(1.0 / (1.0 + eta @ v)), eta)

    L = objective(nu)
    mass_cap = opts.mass_cap if opts.mass_cap is not None else coercivity_bound(model, omega, max(L, 0.0))
    history, times = [L], [0.0]
    t, dt = 0.0, opts.replicator_dt
    merges = invasions = 0

    for step in range(1, opts.replicator_max_steps + 1):
        g = growth(nu)
        tiny = (nu > 0) & (nu < opts.prune_tol) & (g < 0)
        if tiny.any():
            nu[tiny] = 0.0
            L = objective(nu)

        support = nu > 0
        residual = float(np.max(np.abs(g[support]))) if support.any() else 0.0
        violation = float(np.max(g))
        if residual <= opts.stationarity_tol and violation <= opts.cert_tol:
            break

        if step % opts.merge_every == 0 and support.any():
            merged = np.zeros_like(nu)
            for basin in _growth_basins(g, idx):
                mass = nu[basin].sum()
                if mass > 0:
                    merged[basin[np.argmax(g[basin])]] += mass
            L_merged = objective(merged)
            if L_merged <= L and not np.array_equal(merged, nu):
                nu, L = merged, L_merged
                merges += 1
                history.append(L)
                times.append(t)
                continue

        j = int(np.argmax(g))
        if g[j] > opts.cert_tol and nu[j] == 0.0:
            invaded = False
            delta = opts.invade_mass
            while delta > opts.prune_tol and not invaded:
                trial = nu.copy()
                trial[j] = delta
                L_trial = objective(trial)
                if L_trial < L:
                    nu, L = trial, L_trial
                    invaded = True
                delta *= 0.5
            if invaded:
                invasions += 1
                history.append(L)
                times.append(t)
                continue

        trial = nu * np.exp(dt * g)
        L_trial = objective(trial)
        if L_trial <= L + 1e-13:
            nu, L = trial, L_trial
            t += dt
            history.append(L)
            times.append(t)
            dt = min(dt * 1.5, opts.replicator_max_dt)
        else:
            dt *= 0.5
            if dt < opts.replicator_min_dt:
                break

        if nu.sum() > mass_cap * (1 + 1e-9) + 1e-12:
            raise MetastableConvergenceError(
                f"replicator mass {nu.sum():.6g} exceeds the coercivity bound {mass_cap:.6g}",
                best=nu.copy(), residuals={"mass": float(nu.sum()), "mass_cap": mass_cap})
    else:
        step = opts.replicator_max_steps

    g = growth(nu)
    support = nu > opts.prune_tol
    residual = float(np.max(np.abs(g[support]))) if support.any() else 0.0
    violation = float(np.max(g))
    full = np.zeros(grid.n)
    full[idx] = nu
    if residual > opts.stationarity_tol or violation > opts.cert_tol:
        raise MetastableConvergenceError(
            f"replicator flow did not converge in {step} steps",
            best=full, residuals={"max_violation_on_omega": violation, "max_residual_on_support": residual})

    mu = DiscreteMeasure.from_node_weights(grid, full, opts.prune_tol)
    cert = certify(mu, omega, model, opts.cert_tol, opts.k_bar, opts.merge_cells, iterations=step)
    logger.debug("replicator converged at flow time %.4g after %d steps", t, step)
    return ReplicatorResult(cert, full, np.array(history), np.array(times), step, merges, invasions)
