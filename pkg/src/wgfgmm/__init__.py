"""Gaussian-mixture policy optimization by Wasserstein gradient flows."""

from .bures import bw_grad, bw_retract, lyap_solve, spd_sqrt, w2_gaussian_sq
from .env import TaskSpec, demo_generate, rollout, success_rate, task_preset
from .errors import (
    DimensionError,
    EnvContractError,
    GradientUnreliableError,
    InputError,
    NotPositiveDefiniteError,
    NumericError,
    StepTooLargeError,
    WgfError,
)
from .gmm import BlockSplit, Conditioner, Gaussian, Gmm, em_fit, gmr_condition
from .optimizer import OptimizerConfig, OptimizerState, optimize
from .ot import exact_ot_lp, sinkhorn, sinkhorn_annealed, w2_gmm_sq

__version__ = "0.1.0"
