"""
Shared fixtures for the EVOLIM test suite.
Grids are kept coarse so the solver tests run in seconds.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from Evolution.trait_model import GaussianResource, MutationKernel, ResourceModel, TraitGrid


@pytest.fixture
def grid() -> TraitGrid:
    # dx = 0.05, node 200 sits at x = 0
    return TraitGrid(-10.0, 10.0, 401)


@pytest.fixture
def fine_grid() -> TraitGrid:
    # dx = 0.025
    return TraitGrid(-10.0, 10.0, 801)


@pytest.fixture
def kernel() -> MutationKernel:
    return MutationKernel.cos2(1.0, 257)


@pytest.fixture
def single_model() -> ResourceModel:
    """eta = 2 exp(-x^2): metastable resource 1/2 with one atom of mass 1/2 at x = 0."""
    return ResourceModel((GaussianResource(2.0, 0.0, 1.0),))


@pytest.fixture
def two_model() -> ResourceModel:
    return ResourceModel((GaussianResource(2.0, -1.0, 1.0), GaussianResource(2.0, 1.0, 1.0)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
