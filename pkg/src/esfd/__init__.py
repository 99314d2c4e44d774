"""Entropy stable, positivity preserving finite difference schemes for compressible Euler."""

from .euler import GAMMA, InadmissibleStateError
from .sbp import Grid, build_normal_table, build_operator
from .solver import Discretization, SchemeConfig, integrate, integrate_adaptive

__all__ = [
    "GAMMA",
    "InadmissibleStateError",
    "Grid",
    "build_operator",
    "build_normal_table",
    "Discretization",
    "SchemeConfig",
    "integrate",
    "integrate_adaptive",
]

__version__ = "0.1.0"
