"""Solvers - the eps-level direct solver and the limit Hamilton-Jacobi solver."""
from .eps_solver import EpsRunConfig, EpsSolver, EpsTrace, InitialProfile, audit, initial_profile
from .limit_solver import LimitRunConfig, LimitSolver, LimitTrace, psi_solve, solve_limit

__all__ = [
    'EpsRunConfig', 'EpsSolver', 'EpsTrace', 'InitialProfile', 'audit', 'initial_profile',
    'LimitRunConfig', 'LimitSolver', 'LimitTrace', 'psi_solve', 'solve_limit',
]
