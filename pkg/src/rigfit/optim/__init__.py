"""Residual-based optimization: layouts, forward-mode derivatives, solvers."""

from .dual import Dual
from .layout import Block, ParamLayout
from .problem import ResidualProblem
from .robust import huber, huber_cost, huber_norm
from .solvers import FirstOrderConfig, LMConfig, SolveResult, solve_first_order, solve_lm

__all__ = [
    "Dual", "Block", "ParamLayout", "ResidualProblem",
    "huber", "huber_cost", "huber_norm",
    "FirstOrderConfig", "LMConfig", "SolveResult",
    "solve_first_order", "solve_lm",
]
