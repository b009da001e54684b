"""Conditional DDPM over [K, L] windows with single and fused classifier-free guidance."""
from .guidance import cfg_epsilon, combine_guidance, fused_epsilon, model_eps_fn, raw_epsilons
from .sampling import (
    CLIP_RANGE,
    SamplingDivergedError,
    generate_dataset,
    plan_generation,
    reverse_step,
    sample,
    sample_batch,
)
from .schedule import NoiseSchedule, forward_diffuse, make_schedule, scaled_linear_schedule
from .training import DiffusionDivergedError, DiffusionTrainConfig, GuidanceConfig, diffusion_loss, train_diffusion, training_step
from .unet import Denoiser, UNetConfig

__all__ = [
    "CLIP_RANGE",
    "Denoiser",
    "DiffusionDivergedError",
    "DiffusionTrainConfig",
    "GuidanceConfig",
    "NoiseSchedule",
    "SamplingDivergedError",
    "UNetConfig",
    "cfg_epsilon",
    "combine_guidance",
    "diffusion_loss",
    "forward_diffuse",
    "fused_epsilon",
    "generate_dataset",
    "make_schedule",
    "model_eps_fn",
    "plan_generation",
    "raw_epsilons",
    "reverse_step",
    "sample",
    "sample_batch",
    "scaled_linear_schedule",
    "train_diffusion",
    "training_step",
]
