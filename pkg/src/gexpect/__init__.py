"""Sublinear (G-) expectations: lattice schemes, HJB/G-heat solvers, backward equations,
Monte Carlo under volatility uncertainty, and closed-form oracles."""

from .core import GFunctionValue, ModelSpec, UncertaintyBox, g_star, g_sup, optimize_box_affine
from .expr import FieldExpr, parse_field
from .lattice import CFLError, ControlPolicy, GridSpec, TreeSpec, ValueSurface, conditional_expectation
from .pde import BSBSpec, bsb_price, multi_band_hjb, solve_gheat, solve_hjb

__version__ = "0.1.0"

__all__ = [
    "BSBSpec",
    "CFLError",
    "ControlPolicy",
    "FieldExpr",
    "GFunctionValue",
    "GridSpec",
    "ModelSpec",
    "TreeSpec",
    "UncertaintyBox",
    "ValueSurface",
    "bsb_price",
    "conditional_expectation",
    "g_star",
    "g_sup",
    "multi_band_hjb",
    "optimize_box_affine",
    "parse_field",
    "solve_gheat",
    "solve_hjb",
]
