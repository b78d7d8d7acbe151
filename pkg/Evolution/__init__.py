"""Evolution - trait-structured chemostat populations and their Hamilton-Jacobi limit."""
__version__ = "1.0.0"

from .errors import (
    BlowUpError, EvolimError, InvalidInputError, KernelRangeError,
    MetastableConvergenceError, ScenarioError, StructureWarning,
)
from .trait_model import (
    DiscreteMeasure, LogDensityState, MutationKernel, ResourceModel, ResourceVector, TraitGrid,
)
from .metastable import EquilibriumCertificate, FeasibleSet, MetastableOptions

__all__ = [
    '__version__',
    'BlowUpError', 'EvolimError', 'InvalidInputError', 'KernelRangeError',
    'MetastableConvergenceError', 'ScenarioError', 'StructureWarning',
    'DiscreteMeasure', 'LogDensityState', 'MutationKernel', 'ResourceModel', 'ResourceVector', 'TraitGrid',
    'EquilibriumCertificate', 'FeasibleSet', 'MetastableOptions',
]
