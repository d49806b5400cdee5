"""Numerical laboratory for the mean-field equation on the unit flat torus."""

from __future__ import annotations

from .blowup import (
    BlowupDiagnostics,
    ContinuationResult,
    TestFunctionSpec,
    build_test_function,
    continuation_run,
    default_schedule,
    inf_J_formula,
    j_expansion_fit,
)
from .functional import FunctionalEval, eval_J, grad_J
from .green import GreenData, green_function, robin_constant
from .prescribed import PrescribedFunction
from .solver import SolverOptions, SolverState, cold_start, minimize, newton_refine
from .spectral import ScalarField, TorusGrid, grid

__version__ = "0.1.0"

__all__ = [
    "BlowupDiagnostics",
    "ContinuationResult",
    "FunctionalEval",
    "GreenData",
    "PrescribedFunction",
    "ScalarField",
    "SolverOptions",
    "SolverState",
    "TestFunctionSpec",
    "TorusGrid",
    "__version__",
    "build_test_function",
    "cold_start",
    "continuation_run",
    "default_schedule",
    "eval_J",
    "grad_J",
    "green_function",
    "grid",
    "inf_J_formula",
    "j_expansion_fit",
    "minimize",
    "newton_refine",
    "robin_constant",
]
