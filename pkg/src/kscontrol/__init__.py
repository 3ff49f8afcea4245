"""Optimal bilinear control of a chemotaxis system with logistic growth.

The package solves, on a 2-D rectangle with zero-flux boundaries,

    du/dt - lap u + kappa div(u grad v) = r u - mu u^2
    dv/dt - lap v + v = u + f v 1_C

and minimizes a tracking cost over the bilinear control ``f`` by projected
gradient descent, with the gradient assembled from a discrete dual sweep.
Everything is finite volumes on a uniform cell-centered grid, backward Euler
in time, and hand-rolled preconditioned CG - no external solver machinery.
"""

from .control import (
    AdmissibleSet,
    ControlField,
    CostWeights,
    GradientField,
    TrackingTargets,
    control_cost,
    project,
    qc_norm,
    reduced_gradient,
    require_well_posed,
    vi_residual,
)
from .adjoint import AdjointTrajectory, solve_adjoint, solve_linearized_dual, step_adjoint
from .errors import (
    ConfigError,
    GridMismatchError,
    KSControlError,
    LinearSolverError,
    PicardDivergenceError,
    SnapshotFormatError,
    StepConditioningError,
)
from .forward import (
    ModelParams,
    PicardSettings,
    StateTrajectory,
    TimeGrid,
    picard_step,
    solve_forward,
    step_u,
    step_v,
)
from .linalg import DEFAULT_CG_TOL, solve_cg
from .mesh import (
    Field2D,
    GridSpec,
    RegionMask,
    chemotaxis_divergence,
    chemotaxis_divergence_adjoint,
    constant_field,
    field_from_function,
    integrate,
    inner,
    laplacian_neumann,
    norms,
)
from .optimize import (
    ArmijoSettings,
    ControlProblem,
    CostBreakdown,
    IterateRecord,
    KKTReport,
    OptimizeOptions,
    OptimizeReport,
    cost_of_control,
    evaluate_cost,
    kkt_report,
    solve,
)
from .verify import (
    ConvergenceTable,
    InvariantReport,
    InvariantTolerances,
    ReferenceResult,
    analytic_references,
    duality_gap,
    fd_gradient,
    heat_mode_decay_rate,
    logistic_closed_form,
    mms_convergence,
    monitor_invariants,
    trajectory_l2_distance,
)
from .io_cli import read_snapshot, run, write_snapshot

__version__ = "0.1.0"

__all__ = [
    "AdjointTrajectory",
    "AdmissibleSet",
    "ArmijoSettings",
    "ConfigError",
    "ControlField",
    "ControlProblem",
    "ConvergenceTable",
    "CostBreakdown",
    "CostWeights",
    "DEFAULT_CG_TOL",
    "Field2D",
    "GradientField",
    "GridMismatchError",
    "GridSpec",
    "InvariantReport",
    "InvariantTolerances",
    "IterateRecord",
    "KKTReport",
    "KSControlError",
    "LinearSolverError",
    "ModelParams",
    "OptimizeOptions",
    "OptimizeReport",
    "PicardDivergenceError",
    "PicardSettings",
    "ReferenceResult",
    "RegionMask",
    "SnapshotFormatError",
    "StateTrajectory",
    "StepConditioningError",
    "TimeGrid",
    "TrackingTargets",
    "analytic_references",
    "chemotaxis_divergence",
    "chemotaxis_divergence_adjoint",
    "constant_field",
    "control_cost",
    "cost_of_control",
    "duality_gap",
    "evaluate_cost",
    "fd_gradient",
    "field_from_function",
    "heat_mode_decay_rate",
    "inner",
    "integrate",
    "kkt_report",
    "laplacian_neumann",
    "logistic_closed_form",
    "mms_convergence",
    "monitor_invariants",
    "norms",
    "picard_step",
    "project",
    "qc_norm",
    "read_snapshot",
    "reduced_gradient",
    "require_well_posed",
    "run",
    "solve",
    "solve_adjoint",
    "solve_cg",
    "solve_forward",
    "solve_linearized_dual",
    "step_adjoint",
    "step_u",
    "step_v",
    "trajectory_l2_distance",
    "vi_residual",
    "write_snapshot",
]
