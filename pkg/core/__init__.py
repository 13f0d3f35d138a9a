"""Numerical core: autodiff, models, DP-SGD, privacy accounting and evaluation."""

from .accountant import PrivacyLedger, calibrate_sigma, compute_epsilon
from .diffusion import LatentDiffusion, ddpm_sample, make_schedule
from .dp_optimizer import DPConfig, dp_sgd_run
from .pipeline import StagePipeline, run_stage, verify_stamp

__all__ = [
    'DPConfig',
    'LatentDiffusion',
    'PrivacyLedger',
    'StagePipeline',
    'calibrate_sigma',
    'compute_epsilon',
    'ddpm_sample',
    'dp_sgd_run',
    'make_schedule',
    'run_stage',
    'verify_stamp',
]
