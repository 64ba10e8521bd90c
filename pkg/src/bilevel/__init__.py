"""Bilevel convex optimization by explicit three-step iterations, with a tomography testbed."""

from . import core, feasibility, objectives, operators, solvers, tomo
from .core import (
    BilevelProblem,
    OperatorMeta,
    SolverDivergence,
    SolverTrace,
    StepSchedule,
    StoppingParams,
    run_bilevel,
    sigma0,
    sigma1,
    stopping_procedure,
)

__all__ = [
    "BilevelProblem",
    "OperatorMeta",
    "SolverDivergence",
    "SolverTrace",
    "StepSchedule",
    "StoppingParams",
    "core",
    "feasibility",
    "objectives",
    "operators",
    "run_bilevel",
    "sigma0",
    "sigma1",
    "solvers",
    "stopping_procedure",
    "tomo",
]
