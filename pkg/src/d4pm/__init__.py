"""Dual-branch conditional diffusion for single-channel artifact removal."""

from .denoiser import BranchDenoiser, Denoiser, DenoiserConfig, init_params
from .metrics import MetricsReport
from .oracle import GaussianPrior, OracleDenoiser, joint_gaussian_posterior, optimal_eps
from .sampler import SamplerConfig, joint_sample, single_branch_sample
from .schedule import NoiseSchedule, inference_level, make_schedule, sample_continuous_level
from .signals import (DatasetSplit, MixedExample, Segment, SignalClass, build_mixed_dataset, generate_synthetic,
                      lambda_for_snr, mix)
from .trainer import Branch, TrainConfig, load_checkpoint, save_checkpoint, train_branch

__version__ = "0.1.0"
