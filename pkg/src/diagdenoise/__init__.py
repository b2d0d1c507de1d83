"""Diagonal denoising pipeline with a noisy rolling KV cache, plus the
flow-matched distillation testbed that trains and certifies it at desk scale."""

from .denoiser import Denoiser, LatentChunk, ToyCausalDiT
from .kv_cache import KVCache, cache_noisy_result, gather_context, memory_bytes
from .numerics import Rng, Tensor, finite_diff_grad, gaussian_sample
from .pipeline import GenerationResult, PipelineConfig, generate, reference_generate
from .schedule import NoiseSchedule, forward_diffuse, score_from_denoised, shift_timestep
from .step_planner import CostModel, StepSchedule, nfe_count, parse_schedule, simulate, timesteps_for
from .trainer import LossWeights, TrainerConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "Denoiser", "LatentChunk", "ToyCausalDiT",
    "KVCache", "cache_noisy_result", "gather_context", "memory_bytes",
    "Rng", "Tensor", "finite_diff_grad", "gaussian_sample",
    "GenerationResult", "PipelineConfig", "generate", "reference_generate",
    "NoiseSchedule", "forward_diffuse", "score_from_denoised", "shift_timestep",
    "CostModel", "StepSchedule", "nfe_count", "parse_schedule", "simulate",
    "timesteps_for",
    "LossWeights", "TrainerConfig", "run_training",
]
