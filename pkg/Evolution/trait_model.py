# Trait Model - the shared vocabulary of every EVOLIM solver:
# trait grids, mutation kernels, growth functions, resources, measures and the
# log-density state, plus the pointwise and integral evaluations built on them.

import logging
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit, logsumexp

from .errors import InvalidInputError, KernelRangeError, StructureWarning

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

# Exponent arguments beyond this raise instead of saturating.
EXPONENT_GUARD = 500.0
MIN_KERNEL_RESOLUTION = 64


# ============================================================================
# ENUMS
# ============================================================================

class KernelFamily(str, Enum):
    COS2 = "cos2"                # normalised cos^2 bump on [-rho, rho]
    SMOOTH_BUMP = "smooth_bump"  # exp(-1/(1-(z/rho)^2)), C_c^infinity
    TABLE = "table"              # user tabulation
    OFF = "off"                  # K = 0, mutation switched off (tests only)


class ResourceFamily(str, Enum):
    GAUSSIAN = "gaussian"
    TABULATED = "tabulated"
    CONSTANT = "constant"


# ============================================================================
# TRAIT GRID
# ============================================================================

@dataclass(frozen=True)
class TraitGrid:
    """Uniform 1-D discretization of the trait axis; nodes are x_min + j*dx."""
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise InvalidInputError("grid bounds must be finite")
        if int(self.n) != self.n or self.n < 3:
            raise InvalidInputError(f"grid needs at least 3 nodes, got n={self.n}")
        if not self.x_max > self.x_min:
            raise InvalidInputError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        object.__setattr__(self, "n", int(self.n))

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def nodes(self) -> np.ndarray:
        return self.x_min + np.arange(self.n) * self.dx

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.trapezoid_weights(), values))

    def node_index(self, x: float) -> int:
        """Index of the node nearest to x (clipped to the grid)."""
        j = int(np.rint((x - self.x_min) / self.dx))
        return min(max(j, 0), self.n - 1)

    def check_field(self, values: ArrayLike, name: str = "field") -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if arr.shape != (self.n,):
            raise InvalidInputError(f"{name} has shape {arr.shape}, grid expects ({self.n},)")
        return arr

    def shifted(self, offset: float) -> "TraitGrid":
        return TraitGrid(self.x_min + offset, self.x_max + offset, self.n)

    def refined(self) -> "TraitGrid":
        """Same window with dx halved (old nodes are the even nodes of the new grid)."""
        return TraitGrid(self.x_min, self.x_max, 2 * self.n - 1)

    def to_dict(self) -> Dict[str, Any]:
        return {"x_min": float(self.x_min), "x_max": float(self.x_max), "n": self.n}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TraitGrid":
        return cls(float(data["x_min"]), float(data["x_max"]), int(data["n"]))


# ============================================================================
# MUTATION KERNEL
# ============================================================================

@dataclass(frozen=True, eq=False)
class MutationKernel:
    """
    Mutation kernel K tabulated on a symmetric uniform grid of [-rho, rho].

    After construction K >= 0, K(+-rho) = 0, K is even (symmetrised) and the
    trapezoid mass is 1, so the first moment vanishes to rounding.
    """
    support_radius: float
    nodes: np.ndarray
    density: np.ndarray
    weights: np.ndarray
    family: KernelFamily = KernelFamily.TABLE

    @classmethod
    def from_profile(cls, profile: Callable[[np.ndarray], np.ndarray], support_radius: float,
                     resolution: int = 257, family: KernelFamily = KernelFamily.TABLE) -> "MutationKernel":
        if not (np.isfinite(support_radius) and support_radius > 0):
            raise InvalidInputError(f"kernel support radius must be positive, got {support_radius}")
        if resolution < MIN_KERNEL_RESOLUTION:
            raise InvalidInputError(
                f"kernel resolution {resolution} below the minimum of {MIN_KERNEL_RESOLUTION}")
        m = int(resolution) | 1  # odd, so z = 0 is a node
        z = np.linspace(-support_radius, support_radius, m)
        density = np.asarray(profile(z), dtype=float)
        if not np.all(np.isfinite(density)):
            raise InvalidInputError("kernel profile has non-finite values")
        if density.min() < -1e-14 * max(1.0, np.abs(density).max()):
            raise InvalidInputError("mutation kernel must be nonnegative")
        density = 0.5 * (np.clip(density, 0.0, None) + np.clip(density[::-1], 0.0, None))
        density[0] = density[-1] = 0.0
        h = z[1] - z[0]
        weights = np.full(m, h)
        weights[0] = weights[-1] = 0.5 * h
        mass = float(np.dot(weights, density))
        if mass <= 0.0:
            raise InvalidInputError("mutation kernel has zero mass")
        return cls(float(support_radius), z, density / mass, weights, family)

    @classmethod
    def cos2(cls, support_radius: float = 1.0, resolution: int = 257) -> "MutationKernel":
        return cls.from_profile(lambda z: np.cos(0.5 * np.pi * z / support_radius) ** 2,
                                support_radius, resolution, KernelFamily.COS2)

    @classmethod
    def smooth_bump(cls, support_radius: float = 1.0, resolution: int = 257) -> "MutationKernel":
        def bump(z):
            r2 = (z / support_radius) ** 2
            out = np.zeros_like(z)
            inside = r2 < 1.0
            out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
            return out
        return cls.from_profile(bump, support_radius, resolution, KernelFamily.SMOOTH_BUMP)

    @classmethod
    def from_table(cls, z_table: ArrayLike, values: ArrayLike, resolution: int = 257) -> "MutationKernel":
        z_table = np.asarray(z_table, dtype=float)
        values = np.asarray(values, dtype=float)
        if z_table.shape != values.shape or z_table.size < 3:
            raise InvalidInputError("kernel table needs matching z / K columns with >= 3 rows")
        if np.any(np.diff(z_table) <= 0):
            raise InvalidInputError("kernel table z column must be strictly increasing")
        rho = float(np.max(np.abs(z_table)))
        return cls.from_profile(lambda z: np.interp(z, z_table, values, left=0.0, right=0.0),
                                rho, resolution, KernelFamily.TABLE)

    @classmethod
    def off(cls, support_radius: float = 1.0, resolution: int = 65) -> "MutationKernel":
        """K = 0: mutation switched off. Violates unit mass on purpose; testing only."""
        m = max(int(resolution), 3) | 1
        z = np.linspace(-support_radius, support_radius, m)
        h = z[1] - z[0]
        weights = np.full(m, h)
        weights[0] = weights[-1] = 0.5 * h
        return cls(float(support_radius), z, np.zeros(m), weights, KernelFamily.OFF)

    @property
    def is_off(self) -> bool:
        return self.family == KernelFamily.OFF

    @property
    def mass(self) -> float:
        return float(np.dot(self.weights, self.density))

    @property
    def first_moment(self) -> float:
        return float(np.dot(self.weights, self.density * self.nodes))

    @property
    def second_moment(self) -> float:
        return float(np.dot(self.weights, self.density * self.nodes ** 2))

    @property
    def quadrature(self) -> np.ndarray:
        """Combined weights w_m * K(z_m)."""
        return self.weights * self.density

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family.value, "support_radius": self.support_radius,
                "resolution": int(self.nodes.size)}


def _guard_exponent(max_arg: float, guard: float, what: str) -> None:
    if not np.isfinite(max_arg) or max_arg > guard:
        raise KernelRangeError(f"{what}: exponent argument {max_arg:.6g} exceeds guard {guard:g}",
                               max_argument=max_arg)


def hamiltonian_H(kernel: MutationKernel, p: ArrayLike, guard: float = EXPONENT_GUARD):
    """
    H(p) = int K(z) (e^{pz} - 1) dz by the kernel quadrature.

    K is even after construction, so the odd part of e^{pz} - 1 integrates to
    zero and the even part 2 sinh^2(pz/2) is summed instead: H(p) >= 0 and
    H(p) = H(-p) hold to rounding.
    """
    p_arr = np.asarray(p, dtype=float)
    _guard_exponent(float(np.max(np.abs(p_arr))) * kernel.support_radius if p_arr.size else 0.0,
                    guard, "hamiltonian_H")
    pz = np.multiply.outer(p_arr, kernel.nodes)
    values = 2.0 * np.sinh(0.5 * pz) ** 2 @ kernel.quadrature
    return float(values) if p_arr.ndim == 0 else values


def hamiltonian_H_prime(kernel: MutationKernel, p: ArrayLike, guard: float = EXPONENT_GUARD):
    """H'(p) = int z K(z) e^{pz} dz (even K: int z K(z) sinh(pz) dz)."""
    p_arr = np.asarray(p, dtype=float)
    _guard_exponent(float(np.max(np.abs(p_arr))) * kernel.support_radius if p_arr.size else 0.0,
                    guard, "hamiltonian_H_prime")
    pz = np.multiply.outer(p_arr, kernel.nodes)
    values = (kernel.nodes * np.sinh(pz)) @ kernel.quadrature
    return float(values) if p_arr.ndim == 0 else values


# ============================================================================
# GROWTH FUNCTIONS (eta_i)
# ============================================================================

class GrowthFunction(ABC):
    """One resource-specific growth function eta_i(x) > 0 with two derivatives."""

    family: ResourceFamily

    @abstractmethod
    def value(self, x: ArrayLike) -> np.ndarray:
        pass

    @abstractmethod
    def derivative(self, x: ArrayLike, order: int = 1) -> np.ndarray:
        pass

    @abstractmethod
    def shifted(self, offset: float) -> "GrowthFunction":
        pass

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        pass

    def __call__(self, x: ArrayLike) -> np.ndarray:
        return self.value(x)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GrowthFunction":
        family = data.get("family", "gaussian")
        if family == ResourceFamily.GAUSSIAN.value:
            return GaussianResource(float(data["amplitude"]), float(data.get("center", 0.0)),
                                    float(data.get("width", 1.0)))
        if family == ResourceFamily.CONSTANT.value:
            return ConstantResource(float(data["amplitude"]))
        if family == ResourceFamily.TABULATED.value:
            return TabulatedResource(np.asarray(data["x"], dtype=float),
                                     np.asarray(data["values"], dtype=float))
        raise InvalidInputError(f"Unknown resource family: {family}")


@dataclass(frozen=True)
class GaussianResource(GrowthFunction):
    """a * exp(-(x - c)^2 / w^2)"""
    amplitude: float
    center: float = 0.0
    width: float = 1.0
    family: ResourceFamily = field(default=ResourceFamily.GAUSSIAN, init=False)

    def __post_init__(self):
        if not (self.amplitude > 0 and self.width > 0):
            raise InvalidInputError("gaussian resource needs positive amplitude and width")

    def value(self, x: ArrayLike) -> np.ndarray:
        y = (np.asarray(x, dtype=float) - self.center) / self.width
        return self.amplitude * np.exp(-y * y)

    def derivative(self, x: ArrayLike, order: int = 1) -> np.ndarray:
        y = (np.asarray(x, dtype=float) - self.center) / self.width
        v = self.amplitude * np.exp(-y * y)
        if order == 1:
            return -2.0 * y * v / self.width
        if order == 2:
            return (4.0 * y * y - 2.0) * v / self.width ** 2
        raise InvalidInputError(f"derivative order {order} not available")

    def shifted(self, offset: float) -> "GaussianResource":
        return GaussianResource(self.amplitude, self.center + offset, self.width)

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family.value, "amplitude": self.amplitude,
                "center": self.center, "width": self.width}


@dataclass(frozen=True)
class ConstantResource(GrowthFunction):
    """eta(x) = a everywhere. Does not decay, so the envelope check rejects it."""
    amplitude: float
    family: ResourceFamily = field(default=ResourceFamily.CONSTANT, init=False)

    def __post_init__(self):
        if not self.amplitude > 0:
            raise InvalidInputError("constant resource needs a positive amplitude")

    def value(self, x: ArrayLike) -> np.ndarray:
        return np.full(np.shape(x), self.amplitude, dtype=float)

    def derivative(self, x: ArrayLike, order: int = 1) -> np.ndarray:
        return np.zeros(np.shape(x), dtype=float)

    def shifted(self, offset: float) -> "ConstantResource":
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family.value, "amplitude": self.amplitude}


@dataclass(frozen=True, eq=False)
class TabulatedResource(GrowthFunction):
    """Cubic spline through user values; held at the end values outside the table."""
    x_table: np.ndarray
    values: np.ndarray
    family: ResourceFamily = field(default=ResourceFamily.TABULATED, init=False)

    def __post_init__(self):
        x_table = np.asarray(self.x_table, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if x_table.shape != values.shape or x_table.size < 4:
            raise InvalidInputError("tabulated resource needs matching x / values with >= 4 rows")
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise InvalidInputError("tabulated resource values must be finite and positive")
        object.__setattr__(self, "x_table", x_table)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_spline", CubicSpline(x_table, values))

    def _inside(self, x: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return np.clip(x, self.x_table[0], self.x_table[-1]), (x >= self.x_table[0]) & (x <= self.x_table[-1])

    def value(self, x: ArrayLike) -> np.ndarray:
        xc, _ = self._inside(x)
        return self._spline(xc)

    def derivative(self, x: ArrayLike, order: int = 1) -> np.ndarray:
        xc, inside = self._inside(x)
        return np.where(inside, self._spline(xc, order), 0.0)

    def shifted(self, offset: float) -> "TabulatedResource":
        return TabulatedResource(self.x_table + offset, self.values)

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family.value, "x": self.x_table.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True)
class ResourceModel:
    """The k growth functions eta_i and their envelope eta_bar."""
    resources: Tuple[GrowthFunction, ...]
    envelope: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "resources", tuple(self.resources))
        if not self.resources:
            raise InvalidInputError("resource model needs at least one growth function")

    @property
    def k(self) -> int:
        return len(self.resources)

    def eta(self, x: ArrayLike) -> np.ndarray:
        """Matrix eta_i(x_j), shape (k, len(x))."""
        return np.vstack([np.atleast_1d(r.value(x)) for r in self.resources])

    def eta_prime(self, x: ArrayLike) -> np.ndarray:
        return np.vstack([np.atleast_1d(r.derivative(x, 1)) for r in self.resources])

    def eta_second(self, x: ArrayLike) -> np.ndarray:
        return np.vstack([np.atleast_1d(r.derivative(x, 2)) for r in self.resources])

    def eta_bar(self, x: ArrayLike) -> np.ndarray:
        """Envelope dominating sum_i |eta_i| + |eta_i'| + |eta_i''|."""
        if self.envelope is not None:
            return np.asarray(self.envelope(np.asarray(x, dtype=float)), dtype=float)
        return (np.abs(self.eta(x)) + np.abs(self.eta_prime(x)) + np.abs(self.eta_second(x))).sum(axis=0)

    def shifted(self, offset: float) -> "ResourceModel":
        return ResourceModel(tuple(r.shifted(offset) for r in self.resources))

    def to_dict(self) -> Dict[str, Any]:
        return {"resources": [r.to_dict() for r in self.resources]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResourceModel":
        return cls(tuple(GrowthFunction.from_dict(r) for r in data["resources"]))


# ============================================================================
# RESOURCES, MEASURES, STATE
# ============================================================================

@dataclass(frozen=True, eq=False)
class ResourceVector:
    """Resource concentrations I_1..I_k; admissible values lie in (0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_1d(np.asarray(self.values, dtype=float)))

    @property
    def k(self) -> int:
        return int(self.values.size)

    def is_admissible(self) -> bool:
        return bool(np.all(self.values > 0.0) and np.all(self.values <= 1.0))

    def validated(self) -> "ResourceVector":
        if not self.is_admissible():
            raise InvalidInputError(f"resource vector outside (0, 1]: {self.values.tolist()}")
        return self

    def to_list(self) -> List[float]:
        return [float(v) for v in self.values]


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite nonnegative measure sum_l alpha_l delta_{x_l} with increasing locations."""
    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.locations, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if loc.shape != w.shape or loc.ndim != 1:
            raise InvalidInputError("measure needs one weight per location")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(w))):
            raise InvalidInputError("measure atoms must be finite")
        if np.any(w < 0):
            raise InvalidInputError("measure weights must be nonnegative")
        if np.any(np.diff(loc) <= 0):
            raise InvalidInputError("measure locations must be strictly increasing")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls) -> "DiscreteMeasure":
        return cls(np.zeros(0), np.zeros(0))

    @classmethod
    def from_node_weights(cls, grid: TraitGrid, weights: np.ndarray,
                          prune_tol: float = 1e-10) -> "DiscreteMeasure":
        weights = grid.check_field(weights, "node weights")
        keep = weights > prune_tol
        return cls(grid.nodes[keep], weights[keep])

    @property
    def n_atoms(self) -> int:
        return int(self.weights.size)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def is_empty(self) -> bool:
        return self.n_atoms == 0

    def pruned(self, tol: float = 1e-10) -> "DiscreteMeasure":
        keep = self.weights > tol
        return DiscreteMeasure(self.locations[keep], self.weights[keep])

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.locations, self.weights * factor)

    def to_dict(self) -> Dict[str, Any]:
        return {"atoms": [{"x": float(x), "weight": float(a)}
                          for x, a in zip(self.locations, self.weights)]}


@dataclass(frozen=True, eq=False)
class LogDensityState:
    """phi(t, .) on a grid; eps > 0 is the scaled problem, eps == 0 the limit object."""
    grid: TraitGrid
    phi: np.ndarray
    eps: float
    t: float = 0.0

    def __post_init__(self):
        phi = self.grid.check_field(self.phi, "phi").copy()
        if not np.all(np.isfinite(phi)):
            raise InvalidInputError("phi must be finite everywhere")
        if not (np.isfinite(self.eps) and self.eps >= 0):
            raise InvalidInputError(f"eps must be >= 0, got {self.eps}")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def is_limit(self) -> bool:
        return self.eps == 0

    def with_phi(self, phi: np.ndarray, t: Optional[float] = None) -> "LogDensityState":
        return replace(self, phi=np.asarray(phi, dtype=float), t=self.t if t is None else t)

    def density(self) -> np.ndarray:
        """u = exp(phi/eps); may overflow for large phi/eps, solvers never call it."""
        _require_eps(self)
        return np.exp(self.phi / self.eps)


def _require_eps(state: LogDensityState) -> None:
    if state.eps <= 0:
        raise InvalidInputError("operation needs eps > 0 (got the limit object)")


# ============================================================================
# POINTWISE / INTEGRAL EVALUATIONS
# ============================================================================

def growth_rate(I: Union[ResourceVector, ArrayLike], model: ResourceModel, x: ArrayLike):
    """sum_i I_i eta_i(x) - 1 (scalar in, scalar out)."""
    values = I.values if isinstance(I, ResourceVector) else np.atleast_1d(np.asarray(I, dtype=float))
    if values.size != model.k:
        raise InvalidInputError(f"resource vector has {values.size} entries, model has k={model.k}")
    g = values @ model.eta(x) - 1.0
    return float(g[0]) if np.ndim(x) == 0 else g


def resource_response(u: ArrayLike, model: ResourceModel, grid: TraitGrid) -> ResourceVector:
    """I_i = 1 / (1 + int eta_i u dx), trapezoid quadrature."""
    u = grid.check_field(u, "population density")
    if not np.all(np.isfinite(u)):
        raise InvalidInputError("population density has non-finite entries")
    if np.any(u < 0):
        raise InvalidInputError("population density must be nonnegative")
    integrals = model.eta(grid.nodes) @ (grid.trapezoid_weights() * u)
    return ResourceVector(1.0 / (1.0 + integrals))


def log_resource_integrals(state: LogDensityState, model: ResourceModel) -> np.ndarray:
    """log int eta_i exp(phi/eps) dx for every i, never materialising u."""
    _require_eps(state)
    w = state.grid.trapezoid_weights()
    a = state.phi / state.eps
    eta = model.eta(state.grid.nodes)
    return np.array([logsumexp(a, b=w * eta_i) for eta_i in eta])


def resource_response_from_state(state: LogDensityState, model: ResourceModel) -> ResourceVector:
    """Resource response in log space: I_i = 1/(1 + e^{L_i}) = expit(-L_i)."""
    return ResourceVector(expit(-log_resource_integrals(state, model)))


def log_mass(state: LogDensityState) -> float:
    """log int exp(phi/eps) dx with the max-shift technique."""
    _require_eps(state)
    return float(logsumexp(state.phi / state.eps, b=state.grid.trapezoid_weights()))


def _interpolated_increments(phi: np.ndarray, rows: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """
    phi(x_j + s*dx) - phi(x_j) for every row j and every shift s (in cells).

    Linear interpolation inside the grid; outside it the end cell is extended,
    i.e. linear extrapolation with the one-sided boundary slope.
    """
    n = phi.size
    pos = rows[:, None] + shifts[None, :]
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
    frac = pos - i0
    left = phi[i0]
    return left + frac * (phi[i0 + 1] - left) - phi[rows][:, None]


def hamiltonian_H_eps_field(state: LogDensityState, kernel: MutationKernel,
                            rows: Optional[np.ndarray] = None,
                            guard: float = EXPONENT_GUARD) -> np.ndarray:
    """
    H_eps(phi)(x_j) = int K(z) (exp((phi(x_j + eps z) - phi(x_j))/eps) - 1) dz.

    Evaluated for all nodes (or the given rows) at once.
    """
    _require_eps(state)
    rows = np.arange(state.grid.n) if rows is None else np.atleast_1d(np.asarray(rows, dtype=np.int64))
    if kernel.is_off:
        return np.zeros(rows.size)
    shifts = state.eps * kernel.nodes / state.grid.dx
    arg = _interpolated_increments(np.asarray(state.phi), rows, shifts) / state.eps
    _guard_exponent(float(np.max(np.abs(arg))), guard, "hamiltonian_H_eps")
    return np.expm1(arg) @ kernel.quadrature


def hamiltonian_H_eps(state: LogDensityState, kernel: MutationKernel, j: int,
                      guard: float = EXPONENT_GUARD) -> float:
    if not 0 <= j < state.grid.n:
        raise InvalidInputError(f"node index {j} outside grid of {state.grid.n} nodes")
    return float(hamiltonian_H_eps_field(state, kernel, np.array([j]), guard)[0])


def discrete_lipschitz(phi: np.ndarray, dx: float) -> float:
    """max |phi_{j+1} - phi_j| / dx"""
    return float(np.max(np.abs(np.diff(phi)))) / dx


def discrete_semiconvexity(phi: np.ndarray, dx: float) -> float:
    """min (phi_{j+1} - 2 phi_j + phi_{j-1}) / dx^2 over interior nodes."""
    return float(np.min(phi[2:] - 2.0 * phi[1:-1] + phi[:-2])) / dx ** 2


# ============================================================================
# STRUCTURAL CHECKS (boundeta, root count, invertibility)
# ============================================================================

@dataclass
class StructureReport:
    envelope_ok: bool = True
    positivity_ok: bool = True
    envelope_at_ends: Tuple[float, float] = (0.0, 0.0)
    max_positive_excursions: int = 0
    k_bar: int = 1
    rank_deficient_samples: int = 0
    worst_condition: float = 1.0
    messages: List[str] = field(default_factory=list)

    @property
    def roots_ok(self) -> bool:
        return self.max_positive_excursions <= self.k_bar

    @property
    def invertibility_ok(self) -> bool:
        return self.rank_deficient_samples == 0

    @property
    def passed(self) -> bool:
        return self.envelope_ok and self.positivity_ok

    def to_dict(self) -> Dict[str, Any]:
        return {
            "envelope_ok": self.envelope_ok,
            "positivity_ok": self.positivity_ok,
            "envelope_at_ends": [float(v) for v in self.envelope_at_ends],
            "k_bar": self.k_bar,
            "max_positive_excursions": self.max_positive_excursions,
            "roots_ok": self.roots_ok,
            "rank_deficient_samples": self.rank_deficient_samples,
            "worst_condition": float(self.worst_condition),
            "invertibility_ok": self.invertibility_ok,
            "messages": list(self.messages),
        }


def check_envelope(model: ResourceModel, grid: TraitGrid, tol: float = 1e-3) -> StructureReport:
    """Positivity of every eta_i on the grid and decay of eta_bar at both grid ends."""
    report = StructureReport(k_bar=model.k)
    x = grid.nodes
    eta = model.eta(x)
    if np.any(eta <= 0):
        report.positivity_ok = False
        report.messages.append("some eta_i is not positive on the grid")
    bar = model.eta_bar(np.array([grid.x_min, grid.x_max]))
    report.envelope_at_ends = (float(bar[0]), float(bar[1]))
    if not (bar[0] < tol and bar[1] < tol):
        report.envelope_ok = False
        report.messages.append(
            f"eta_bar does not decay at the grid ends: {bar[0]:.3g}, {bar[1]:.3g} (tolerance {tol:g})")
    return report


def _positive_excursions(g: np.ndarray) -> int:
    positive = g > 0
    return int(positive[0]) + int(np.count_nonzero(positive[1:] & ~positive[:-1]))


def validate_structure(model: ResourceModel, grid: TraitGrid, k_bar: Optional[int] = None,
                       samples: int = 64, rng: Optional[np.random.Generator] = None,
                       boundary_tol: float = 1e-3) -> StructureReport:
    """
    Best-effort sampled checks of the structural hypotheses on the grid.

    Root count: for random I in [0,1]^k, the number of positive excursions of
    sum_i I_i eta_i - 1 must not exceed k_bar. Invertibility: for random
    distinct node tuples the k_bar x k_bar matrix eta_i(x_j) must have full
    numerical rank. Violations are warnings, never errors.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    k_bar = model.k if k_bar is None else int(k_bar)
    report = check_envelope(model, grid, boundary_tol)
    report.k_bar = k_bar
    x = grid.nodes
    eta = model.eta(x)

    for _ in range(samples):
        I = rng.uniform(0.0, 1.0, model.k)
        report.max_positive_excursions = max(report.max_positive_excursions,
                                             _positive_excursions(I @ eta - 1.0))
    if not report.roots_ok:
        report.messages.append(
            f"growth has {report.max_positive_excursions} positive excursions for some I (k_bar={k_bar})")

    if k_bar <= model.k:
        for _ in range(samples):
            cols = np.sort(rng.choice(grid.n, size=k_bar, replace=False))
            matrix = eta[:k_bar][:, cols]
            report.worst_condition = max(report.worst_condition, float(np.linalg.cond(matrix)))
            if np.linalg.matrix_rank(matrix) < k_bar:
                report.rank_deficient_samples += 1
        if not report.invertibility_ok:
            report.messages.append(
                f"eta_i(x_j) rank deficient on {report.rank_deficient_samples}/{samples} sampled node tuples")
    else:
        report.messages.append(f"k_bar={k_bar} exceeds k={model.k}")

    for message in report.messages:
        logger.warning("structure check: %s", message)
        warnings.warn(message, StructureWarning, stacklevel=2)
    return report
