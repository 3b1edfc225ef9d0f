"""Numerical homogenization laboratory for a generalized Ladyzhenskaya model
of incompressible non-Newtonian flow with almost-periodic microstructure."""

from .ap_field import Bounds, CoefficientSet, ForcingLaw, TrigPolynomial
from .cell_solver import (
    CellProblemSpec,
    CorrectorSolution,
    EffectiveLaw,
    TimePeriodic,
    effective_flux,
    solve_corrector,
    solve_corrector_time_periodic,
    verify_uniqueness,
)
from .grid_core import FlowState, MacGrid, leray_project
from .harness import ConvergenceReport, StudyConfig, emit_report, run_convergence_study
from .macro_solver import HomogenizedProblem, mean_forcing, solve_homogenized
from .micro_solver import MicroProblem, Trajectory, energy_report, solve, step

__all__ = [
    "Bounds", "CoefficientSet", "ForcingLaw", "TrigPolynomial",
    "CellProblemSpec", "CorrectorSolution", "EffectiveLaw", "TimePeriodic",
    "effective_flux", "solve_corrector", "solve_corrector_time_periodic",
    "verify_uniqueness", "FlowState", "MacGrid", "leray_project",
    "ConvergenceReport", "StudyConfig", "emit_report", "run_convergence_study",
    "HomogenizedProblem", "mean_forcing", "solve_homogenized",
    "MicroProblem", "Trajectory", "energy_report", "solve", "step",
]

__version__ = "0.1.0"
