"""
Scenario Loader - Read and validate *.scenario files

This module provides a unified entry point for loading EVOLIM scenarios.
A scenario is a YAML document validated against the pydantic models below:
- unknown keys are rejected
- every physical parameter must be finite and inside its documented range
- relative table paths are resolved against the scenario file's directory
"""
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

sys.path.insert(0, str(Path(__file__).parent))

from config import DEFAULTS, SCENARIO_SUFFIXES
from Evolution.errors import EvolimError, ScenarioError
from Evolution.metastable import MetastableOptions
from Evolution.solvers.eps_solver import EpsRunConfig, InitialProfile
from Evolution.solvers.limit_solver import LimitRunConfig
from Evolution.trait_model import GrowthFunction, MutationKernel, ResourceModel, TraitGrid

SOLVERS = ("eps", "limit", "psi", "sweep")


# =============================================================================
# SCHEMA
# =============================================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class GridSpec(_Section):
    x_min: float
    x_max: float
    n: int = Field(ge=3)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        return self


class KernelSpec(_Section):
    family: Literal["cos2", "smooth_bump", "table", "off"] = "cos2"
    support_radius: float = Field(1.0, gt=0)
    resolution: int = Field(DEFAULTS["kernel_resolution"], ge=64)
    path: Optional[str] = None
    z: Optional[List[float]] = None
    K: Optional[List[float]] = None

    @model_validator(mode="after")
    def _table_source(self):
        if self.family == "table" and self.path is None and (self.z is None or self.K is None):
            raise ValueError("kernel family 'table' needs 'path' or both 'z' and 'K'")
        return self


class ResourceSpec(_Section):
    family: Literal["gaussian", "tabulated", "constant"] = "gaussian"
    amplitude: Optional[float] = Field(None, gt=0)
    center: float = 0.0
    width: float = Field(1.0, gt=0)
    path: Optional[str] = None
    x: Optional[List[float]] = None
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _parameters(self):
        if self.family in ("gaussian", "constant") and self.amplitude is None:
            raise ValueError(f"resource family '{self.family}' needs 'amplitude'")
        if self.family == "tabulated" and self.path is None and (self.x is None or self.values is None):
            raise ValueError("resource family 'tabulated' needs 'path' or both 'x' and 'values'")
        return self


class InitialSpec(_Section):
    name: Literal["well", "double_well", "custom"] = "well"
    params: Dict[str, Any] = Field(default_factory=dict)


class TimeSpec(_Section):
    t_end: float = Field(gt=0)
    dt: Optional[float] = Field(None, gt=0)
    cfl: float = Field(DEFAULTS["cfl"], gt=0, le=1)
    n_outputs: int = Field(DEFAULTS["n_outputs"], ge=1)
    audit_every: int = Field(1, ge=1)


class ToleranceSpec(_Section):
    cert_tol: float = Field(DEFAULTS["cert_tol"], gt=0)
    prune_tol: float = Field(DEFAULTS["prune_tol"], gt=0)
    boundary_tol: float = Field(DEFAULTS["boundary_tol"], gt=0)
    phi_barrier: float = Field(DEFAULTS["phi_barrier"], gt=0)
    exponent_guard: float = Field(DEFAULTS["exponent_guard"], gt=0)
    max_iters: int = Field(200, ge=1)
    structure_samples: int = Field(DEFAULTS["structure_samples"], ge=1)


class LimitSpec(_Section):
    zero_band: Optional[float] = Field(None, ge=0)
    band_factor: float = Field(DEFAULTS["band_factor"], gt=0)
    dissipation: Literal["local", "global"] = "local"
    lf_lambda: Optional[float] = Field(None, gt=0)


class AnalysisSpec(_Section):
    window_fraction: float = Field(DEFAULTS["window_fraction"], gt=0, le=1)
    mass_fraction: float = Field(DEFAULTS["mass_fraction"], gt=0, lt=1)
    dirac_threshold: float = Field(1.0, gt=0)
    jump_threshold: float = Field(1e-2, gt=0)
    sup_phi_constant: float = Field(1.0, gt=0)
    audit_slack: float = Field(2.0, ge=1)


class OutputSpec(_Section):
    dir: Optional[str] = None
    snapshots: bool = True
    write_density: bool = False


class Scenario(_Section):
    """A fully validated run description."""
    name: str
    solver: Literal["eps", "limit", "psi", "sweep"]
    seed: int = 0
    grid: GridSpec
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    resources: List[ResourceSpec] = Field(min_length=1)
    k_bar: Optional[int] = Field(None, ge=1)
    initial: InitialSpec = Field(default_factory=InitialSpec)
    eps: List[float] = Field(default_factory=lambda: [0.05], min_length=1)
    time: TimeSpec
    tolerances: ToleranceSpec = Field(default_factory=ToleranceSpec)
    limit: LimitSpec = Field(default_factory=LimitSpec)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @field_validator("eps")
    @classmethod
    def _positive_eps(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("every eps must be positive")
        if len(set(values)) != len(values):
            raise ValueError("eps values must be distinct")
        return values

    # ------------------------------------------------------------ builders

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self._base_dir / p

    @property
    def sorted_eps(self) -> List[float]:
        """eps values, strictly decreasing."""
        return sorted(self.eps, reverse=True)

    def build_grid(self) -> TraitGrid:
        return TraitGrid(self.grid.x_min, self.grid.x_max, self.grid.n)

    def build_kernel(self) -> MutationKernel:
        spec = self.kernel
        if spec.family == "cos2":
            return MutationKernel.cos2(spec.support_radius, spec.resolution)
        if spec.family == "smooth_bump":
            return MutationKernel.smooth_bump(spec.support_radius, spec.resolution)
        if spec.family == "off":
            return MutationKernel.off(spec.support_radius)
        if spec.path is not None:
            z, K = _read_columns(self.resolve(spec.path), ("z", "K"))
        else:
            z, K = np.asarray(spec.z, dtype=float), np.asarray(spec.K, dtype=float)
        return MutationKernel.from_table(z, K, spec.resolution)

    def build_model(self) -> ResourceModel:
        functions = []
        for spec in self.resources:
            data = spec.model_dump(exclude_none=True)
            if spec.family == "tabulated" and spec.path is not None:
                x, values = _read_columns(self.resolve(spec.path), ("x", "values"))
                data.update({"x": x, "values": values})
            functions.append(GrowthFunction.from_dict(data))
        return ResourceModel(tuple(functions))

    def initial_profile(self) -> InitialProfile:
        params = dict(self.initial.params)
        if "path" in params:
            params["path"] = self.resolve(str(params["path"]))
        return InitialProfile(self.initial.name, params)

    def metastable_options(self) -> MetastableOptions:
        tol = self.tolerances
        return MetastableOptions(cert_tol=tol.cert_tol, prune_tol=tol.prune_tol,
                                 max_iters=tol.max_iters, k_bar=self.k_bar)

    def eps_config(self, eps: float) -> EpsRunConfig:
        return EpsRunConfig(
            eps=eps, t_end=self.time.t_end, grid=self.build_grid(), kernel=self.build_kernel(),
            model=self.build_model(), initial=self.initial_profile(), dt=self.time.dt, cfl=self.time.cfl,
            n_outputs=self.time.n_outputs, audit_every=self.time.audit_every,
            phi_barrier=self.tolerances.phi_barrier, guard=self.tolerances.exponent_guard,
        )

    def limit_config(self) -> LimitRunConfig:
        return LimitRunConfig(
            grid=self.build_grid(), kernel=self.build_kernel(), model=self.build_model(),
            t_end=self.time.t_end, initial=self.initial_profile(), dt=self.time.dt, cfl=self.time.cfl,
            zero_band=self.limit.zero_band, band_factor=self.limit.band_factor,
            dissipation=self.limit.dissipation, lf_lambda=self.limit.lf_lambda,
            n_outputs=self.time.n_outputs, metastable=self.metastable_options(),
            phi_barrier=self.tolerances.phi_barrier, guard=self.tolerances.exponent_guard,
        )

    def resolved(self) -> Dict[str, Any]:
        """Full resolved configuration for the run manifest."""
        return self.model_dump(mode="json")


# =============================================================================
# LOADING
# =============================================================================

def _read_columns(path: Path, columns: Tuple[str, str]) -> Tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise ScenarioError(f"table file not found: {path}")
    frame = pd.read_csv(path)
    missing = set(columns) - set(frame.columns)
    if missing:
        raise ScenarioError(f"{path.name} lacks columns {sorted(missing)}")
    return frame[columns[0]].to_numpy(dtype=float), frame[columns[1]].to_numpy(dtype=float)


def detect_scenario_kind(file_path: str) -> str:
    """
    Detect the document kind from the file extension.

    Args:
        file_path: Path to a scenario file

    Returns:
        'scenario' for *.scenario, 'yaml' for plain YAML documents
    """
    suffix = Path(file_path).suffix.lower()
    if suffix == ".scenario":
        return "scenario"
    if suffix in SCENARIO_SUFFIXES:
        return "yaml"
    raise ScenarioError(f"Unknown file extension: {suffix}. Expected one of {', '.join(SCENARIO_SUFFIXES)}")


def read_document(path: Path) -> Dict[str, Any]:
    detect_scenario_kind(str(path))
    if not path.is_file():
        raise ScenarioError(f"Scenario file not found: {path}")
    yaml = YAML(typ="safe")
    try:
        with path.open("r", encoding="utf-8") as handle:
            data = yaml.load(handle)
    except YAMLError as exc:
        raise ScenarioError(f"{path.name} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError(f"{path.name}: the document root must be a mapping")
    return data


def scenario_from_dict(data: Dict[str, Any], base_dir: Optional[Path] = None) -> Scenario:
    """
    Validate a raw mapping.

    Args:
        data: Parsed scenario document
        base_dir: Directory against which relative table paths resolve

    Returns:
        Validated Scenario

    Raises:
        ScenarioError: with one entry per schema problem
    """
    try:
        scenario = Scenario.model_validate(data)
    except ValidationError as exc:
        problems = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()]
        raise ScenarioError(f"invalid scenario ({len(problems)} problem(s))", problems) from exc
    scenario._base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    return scenario


def load_scenario(path) -> Scenario:
    """
    Load and validate a scenario; also checks that every model object builds.

    Args:
        path: Path to a *.scenario (or *.yaml) file

    Returns:
        Validated Scenario
    """
    path = Path(path)
    scenario = scenario_from_dict(read_document(path), path.parent)
    try:
        scenario.build_grid()
        scenario.build_kernel()
        scenario.build_model()
    except ScenarioError:
        raise
    except EvolimError as exc:
        raise ScenarioError(f"{path.name}: {exc}") from exc
    return scenario
