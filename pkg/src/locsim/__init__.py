"""Fully implicit fractured-reservoir simulation with localized nonlinear solvers."""
from .assembly import FlowModel, ReducedSystem, WellSpec, apply_update, assemble
from .case import CaseConfig, build_model, load_case, parse_case
from .driver import RunMetrics, RunResult, compute_ma, run_case, timestep_schedule
from .errors import (ConfigurationError, ConvergenceFailure, FlashFailure, LinearSolverError,
                     LocsimError, NumericalError)
from .fluid import CompositionalFluid, OilWaterFluid, PengRobinson, flash, rachford_rice, stability_test
from .grid import ConnectivityGraph, FractureSegment, build_matrix_grid, discretize_fractures, neighbor_set
from .linsolve import solve
from .solvers import SOLVERS, NewtonReport, SolverOptions, adaptive_nonlinear_dd, newton_localized, newton_standard
from .state import FieldState, uniform_state

__all__ = [
    "FlowModel", "ReducedSystem", "WellSpec", "apply_update", "assemble",
    "CaseConfig", "build_model", "load_case", "parse_case",
    "RunMetrics", "RunResult", "compute_ma", "run_case", "timestep_schedule",
    "ConfigurationError", "ConvergenceFailure", "FlashFailure", "LinearSolverError",
    "LocsimError", "NumericalError",
    "CompositionalFluid", "OilWaterFluid", "PengRobinson", "flash", "rachford_rice", "stability_test",
    "ConnectivityGraph", "FractureSegment", "build_matrix_grid", "discretize_fractures", "neighbor_set",
    "solve", "SOLVERS", "NewtonReport", "SolverOptions", "adaptive_nonlinear_dd",
    "newton_localized", "newton_standard", "FieldState", "uniform_state",
]
