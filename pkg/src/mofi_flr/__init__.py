"""Model-form identification for high-dimensional functional linear regression.

Two stages: a functional elastic-net selects predictors, then a refit with an
unpenalised finite-dimensional part decides which selected coefficient curves
are "simple" (lie in a chosen null space) and which are "complex".
"""

from .kernels import KernelError, KernelSpec, KernelSplit, grid, psd_sqrt
from .metrics import EvaluationReport, form_metrics, prediction_metrics, rer, selection_metrics
from .operators import DesignError, TruncatedDesign, assemble_design
from .pipeline import (
    KernelBank,
    MofiResult,
    StageOneResult,
    StageTwoResult,
    fenet_refine,
    run_mofi,
    run_mofi_strategies,
    run_step1,
    run_step2,
)
from .simgen import SimConfig, simulate
from .solver import (
    BlockCoefficients,
    BlockProblem,
    ConvergenceError,
    InnerConvergenceError,
    SolverConfig,
    bcd_fit,
    block_update,
    kkt_residual,
)
from .tuning import TuningGrid, TuningRecord, cv_grid_search, split_folds

__version__ = "0.1.0"

__all__ = [
    "BlockCoefficients",
    "BlockProblem",
    "ConvergenceError",
    "DesignError",
    "EvaluationReport",
    "InnerConvergenceError",
    "KernelBank",
    "KernelError",
    "KernelSpec",
    "KernelSplit",
    "MofiResult",
    "SimConfig",
    "SolverConfig",
    "StageOneResult",
    "StageTwoResult",
    "TruncatedDesign",
    "TuningGrid",
    "TuningRecord",
    "assemble_design",
    "bcd_fit",
    "block_update",
    "cv_grid_search",
    "fenet_refine",
    "form_metrics",
    "grid",
    "kkt_residual",
    "prediction_metrics",
    "psd_sqrt",
    "rer",
    "run_mofi",
    "run_mofi_strategies",
    "run_step1",
    "run_step2",
    "selection_metrics",
    "simulate",
    "split_folds",
]
