"""Non-blind image deconvolution with unrolled, learnable ADMM."""

from .admm import (
    AdmmState,
    Model,
    ModelConfig,
    StageParams,
    analytic_model,
    deblur,
    init_model,
    init_state,
    run_stage,
)
from .linop import BlurOperator, Correlator, FilterBank, NormalOperator
from .modelio import ModelFormatError, load_model, save_model
from .shrinkage import AnalyticProx, MaxoutShrinkage, RBFShrinkage, fit_to_target, prox_hyper_laplacian
from .xsolver import SolverError, cg_solve, fft_solve

__version__ = "0.1.0"

__all__ = [
    "AdmmState",
    "AnalyticProx",
    "BlurOperator",
    "Correlator",
    "FilterBank",
    "MaxoutShrinkage",
    "Model",
    "ModelConfig",
    "ModelFormatError",
    "NormalOperator",
    "RBFShrinkage",
    "SolverError",
    "StageParams",
    "analytic_model",
    "cg_solve",
    "deblur",
    "fft_solve",
    "fit_to_target",
    "init_model",
    "init_state",
    "load_model",
    "prox_hyper_laplacian",
    "run_stage",
    "save_model",
]
