"""
EVOLIM Configuration - Centralized path and settings management.

This module contains all configurable paths, numeric defaults and the bundled
scenario registry. Users can modify these values to customize the solvers.
"""
from pathlib import Path

# =============================================================================
# PATH CONFIGURATION
# =============================================================================

# Base directory (project root)
BASE_DIR = Path(__file__).parent

# Bundled scenario files (*.scenario, YAML)
SCENARIO_DIR = BASE_DIR / "scenarios"

# Default artifact directory (overridden by --out / EVOLIM_OUT)
OUTPUT_DIR = BASE_DIR / "runs"

# Tests directory
TESTS_DIR = BASE_DIR / "tests"

SCENARIO_SUFFIXES = (".scenario", ".yaml", ".yml")


# =============================================================================
# NUMERIC DEFAULTS
# =============================================================================

DEFAULTS = {
    "cfl": 0.5,
    "cert_tol": 1e-6,
    "prune_tol": 1e-10,
    "exponent_guard": 500.0,
    "kernel_resolution": 257,
    "phi_barrier": 8.0,
    "boundary_tol": 1e-3,
    "window_fraction": 0.8,
    "mass_fraction": 0.99,
    "structure_samples": 64,
    "band_factor": 10.0,
    "n_outputs": 10,
}

# All floating-point artifacts are written with 17 significant digits
FLOAT_FORMAT = "%.17g"


# =============================================================================
# ENVIRONMENT / EXIT CODES
# =============================================================================

ENV_PREFIX = "EVOLIM_"
ENV_OVERRIDES = ("OUT", "THREADS", "LOG_LEVEL", "SEED")

EXIT_OK = 0
EXIT_CONFIG = 2          # schema / invalid input
EXIT_BLOW_UP = 3         # eps solver left its stability region, exponent guard
EXIT_NON_CONVERGENCE = 4  # metastable minimizer / replicator


# =============================================================================
# SCENARIO CONFIGURATIONS
# =============================================================================
# Bundled scenarios with the solver they run

SCENARIO_CONFIGS = {
    # One Gaussian resource; metastable value I = 1/2 at the single ESS x = 0
    "single_resource": {
        "file": SCENARIO_DIR / "single_resource.scenario",
        "solver": "eps",
        "description": "eta = 2 exp(-x^2), eps = 0.05, T = 5",
    },
    # Two symmetric resources; I_1 = I_2 by symmetry, dimorphic equilibrium
    "two_resource": {
        "file": SCENARIO_DIR / "two_resource.scenario",
        "solver": "limit",
        "description": "eta_1,2 = 2 exp(-(x -+ 1)^2), limit dynamics",
    },
    # eps sweep of the single-resource chemostat against its limit
    "sweep": {
        "file": SCENARIO_DIR / "sweep.scenario",
        "solver": "sweep",
        "description": "eps in {0.2, 0.1, 0.05} against the limit solve",
    },
    # Population started off the eventual ESS: resource jumps and branching
    "jump": {
        "file": SCENARIO_DIR / "jump.scenario",
        "solver": "limit",
        "description": "two resources, initial peak at x0 = 3",
    },
}
