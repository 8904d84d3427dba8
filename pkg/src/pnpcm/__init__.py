"""Plug-and-play ADMM with consistency-model-style denoisers, noise injection and momentum."""

from .denoisers import Denoiser, estimate_lipschitz, make_denoiser
from .engine import RunConfig, Schedule, SolverState, ablation_grid, residual_trace, run, theorem1_check
from .linsolve import CgConfig, CgReport, cg_solve, direct_solve_diagonalizable
from .operators import (
    BlurOperator,
    ComposedOperator,
    DenseOperator,
    DownsampleOperator,
    FourierSubsampleOperator,
    LinearOperator,
    MaskOperator,
    synthesize_measurement,
    to_dense,
)

__version__ = "0.1.0"

__all__ = [
    "BlurOperator",
    "CgConfig",
    "CgReport",
    "ComposedOperator",
    "Denoiser",
    "DenseOperator",
    "DownsampleOperator",
    "FourierSubsampleOperator",
    "LinearOperator",
    "MaskOperator",
    "RunConfig",
    "Schedule",
    "SolverState",
    "ablation_grid",
    "cg_solve",
    "direct_solve_diagonalizable",
    "estimate_lipschitz",
    "make_denoiser",
    "residual_trace",
    "run",
    "synthesize_measurement",
    "theorem1_check",
    "to_dense",
]
