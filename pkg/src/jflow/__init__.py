"""Numerical J-flow and regularized complex Monge-Ampere solvers on the flat complex 2-torus."""

from .elliptic import EllipticProblem, solve_degenerate_family, solve_ma_newton
from .flow import FlowConfig, JFlow, Status, run_flow
from .functionals import functional_I, functional_J
from .geometry import Grid, HermitianFormField, Mode, ScalarField, ddc, wedge11, wedge2

__all__ = [
    "EllipticProblem", "FlowConfig", "Grid", "HermitianFormField", "JFlow", "Mode", "ScalarField", "Status",
    "ddc", "functional_I", "functional_J", "run_flow", "solve_degenerate_family", "solve_ma_newton",
    "wedge11", "wedge2",
]
