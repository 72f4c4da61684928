"""Sparse state-feedback design by l1-regularized LQR with Newton coordinate descent."""
from .ista import IstaOptions, ista_solve, ista_step
from .kernels import lqr_synthesize, max_real_eig, solve_lyapunov, takagi_factor
from .model import CostSpec, Gain, Plant, ProblemFile, mass_spring, random_network, read_problem, write_problem
from .newton_cd import (
    SolveReport,
    SolverOptions,
    deflate_and_stabilize,
    initialize,
    polish,
    solve,
)
from .objective import evaluate

__version__ = "0.1.0"

__all__ = [
    "CostSpec",
    "Gain",
    "IstaOptions",
    "Plant",
    "ProblemFile",
    "SolveReport",
    "SolverOptions",
    "deflate_and_stabilize",
    "evaluate",
    "initialize",
    "ista_solve",
    "ista_step",
    "lqr_synthesize",
    "mass_spring",
    "max_real_eig",
    "polish",
    "random_network",
    "read_problem",
    "solve",
    "solve_lyapunov",
    "takagi_factor",
    "write_problem",
]
