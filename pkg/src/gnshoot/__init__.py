"""Gauss-Newton shooting methods for discrete-time optimal control.

Single shooting, iLQR, GNMS and the hybrid GNMS(M) / iLQR-GNMS(M) variants
share one solver; :mod:`gnshoot.nmpc` builds a real-time NMPC loop on top.
"""

from gnshoot.bench import make_problem, run_contraction_study, run_convergence_experiment
from gnshoot.core import (
    ConfigurationError,
    CostEvaluationError,
    DegenerateProblemError,
    DimensionError,
    GnshootError,
    InsufficientDataError,
    IntegrationDivergenceError,
    IterationRecord,
    ModelError,
    NonConvexityError,
    OcProblem,
    Trajectory,
    control_update_norm,
    total_defect,
)
from gnshoot.cost import CostModel, QuadraticTrackingCost, evaluate, quadratize
from gnshoot.dynamics import (
    DynamicsModel,
    FunctionDynamics,
    Integrator,
    StageSensitivity,
    rollout_interval,
    step,
    step_with_sensitivity,
)
from gnshoot.lq import LQSubproblem, assemble
from gnshoot.nmpc import (
    NmpcState,
    PlantConfig,
    create_controller,
    feedback_step,
    preparation_step,
    run_closed_loop,
)
from gnshoot.oracle import solve_kkt
from gnshoot.riccati import Regularization, RiccatiSolution, backward_sweep, predicted_cost_change
from gnshoot.solver import (
    GNMS,
    ILQR,
    SS,
    InterpolateInit,
    LineSearch,
    ProvidedInit,
    SolveResult,
    SolverSettings,
    SteadyStateInit,
    VariantConfig,
    contraction_rate,
    initialize,
    solve,
)
from gnshoot.sweep import IntervalPartition, forward_sweep, partition, rollout_and_defects

__all__ = [
    "ConfigurationError", "CostEvaluationError", "CostModel", "DegenerateProblemError",
    "DimensionError", "DynamicsModel", "FunctionDynamics", "GNMS", "GnshootError", "ILQR",
    "InsufficientDataError", "IntegrationDivergenceError", "Integrator", "InterpolateInit",
    "IntervalPartition", "IterationRecord", "LQSubproblem", "LineSearch", "ModelError",
    "NmpcState", "NonConvexityError", "OcProblem", "PlantConfig", "ProvidedInit",
    "QuadraticTrackingCost", "Regularization", "RiccatiSolution", "SS", "SolveResult",
    "SolverSettings", "StageSensitivity", "SteadyStateInit", "Trajectory", "VariantConfig",
    "assemble", "backward_sweep", "contraction_rate", "control_update_norm",
    "create_controller", "evaluate", "feedback_step", "forward_sweep", "initialize",
    "make_problem", "partition", "predicted_cost_change", "preparation_step", "quadratize",
    "rollout_and_defects", "rollout_interval", "run_closed_loop", "run_contraction_study",
    "run_convergence_experiment", "solve", "solve_kkt", "step", "step_with_sensitivity",
    "total_defect",
]
