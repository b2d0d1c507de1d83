"""Chunkwise diagonal denoising with a noisy rolling KV cache.

generate() drives the rolling cache; reference_generate() recomputes K/V from
all retained conditioning latents with no cache data structure. Both share one
chunk runner and one RNG draw order, so with forcing_t=0, mixing off, uniform
steps and a full window they must agree bit-exactly - that equivalence is the
oracle the reference pipeline exists to certify.

Per chunk: draw the initial noise, run the scheduled steps against the
committed context, build the noisy cache entry at the penultimate step, mix
the final output, and only then commit the new entry. The conditioning context
therefore never contains the chunk currently being denoised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import step as denoise_step
from .kv_cache import CacheContext, KVCache, cache_noisy_result, gather_context, memory_bytes
from .numerics import Rng, Tensor, gaussian_sample
from .schedule import NoiseSchedule, inject_noise
from .step_planner import StepSchedule, extend_cyclically, timesteps_for


@dataclass(frozen=True)
class PipelineConfig:
    step_schedule: StepSchedule
    chunks: int | None = None            # default: one chunk per schedule entry
    forcing_t: int = 100
    window_chunks: int = 4
    base_phase_chunks: int = 4
    auto_phase: bool = True
    seed: int = 0
    mix_outputs: bool = True
    mix_last: bool = True
    forcing_vp_form: bool = False
    strict_noisy_cache: bool = True
    deterministic_renoise: bool = False
    timestep_policy: str = "linear"


@dataclass(frozen=True)
class ChunkLog:
    chunk_index: int
    steps: int
    timesteps: tuple[int, ...]
    phase: str                            # "base" | "extension"
    forcing_t: int
    context_indices: tuple[int, ...]      # chunks attended to
    cache_indices_after: tuple[int, ...]  # surviving entries once committed
    cache_len_after: int
    cache_memory_bytes: int


@dataclass
class GenerationResult:
    chunks: list[Tensor] = field(default_factory=list)
    logs: list[ChunkLog] = field(default_factory=list)


def mix(x: Tensor, t_force: int, schedule: NoiseSchedule, rng: Rng,
        vp_form: bool = False) -> Tensor:
    """Re-noise a finished chunk to the forcing level before it is consumed."""
    return inject_noise(schedule, x, t_force, rng, vp_form=vp_form)


def _resolve_steps(cfg: PipelineConfig) -> list[int]:
    sched = cfg.step_schedule
    n = cfg.chunks if cfg.chunks is not None else len(sched)
    if n < 1:
        raise ValueError("chunk count must be >= 1")
    if n > len(sched):
        if not sched.cyclic_extension:
            raise ValueError(
                f"schedule has {len(sched)} chunks but {n} requested and "
                "cyclic extension is disabled")
        sched = extend_cyclically(sched, n)
    return list(sched.steps_per_chunk[:n])


def _extension_start(cfg: PipelineConfig, steps: list[int]) -> int:
    """First chunk index (0-based) of the extension phase; len(steps) if none."""
    if cfg.auto_phase:
        for i, s in enumerate(steps):
            if s == 2 and i > 0:
                return i
        return len(steps)
    if cfg.base_phase_chunks > len(cfg.step_schedule) and not cfg.step_schedule.cyclic_extension:
        raise ValueError("base_phase_chunks exceeds the schedule length")
    return max(1, cfg.base_phase_chunks)


class _DiagonalContext:
    """Rolling-cache conditioning (the production path)."""

    def __init__(self, cfg: PipelineConfig, schedule: NoiseSchedule, denoiser):
        self.cfg = cfg
        self.schedule = schedule
        self.denoiser = denoiser
        self.cache = KVCache(window_chunks=cfg.window_chunks)

    def context_for(self, k: int) -> CacheContext:
        return gather_context(self.cache)

    def stage(self, x: Tensor, rng: Rng) -> KVCache:
        return cache_noisy_result(
            self.cache, x, self.cfg.forcing_t, self.schedule, self.denoiser, rng,
            vp_form=self.cfg.forcing_vp_form, strict=self.cfg.strict_noisy_cache)

    def commit(self, staged: KVCache) -> None:
        self.cache = staged

    def snapshot(self) -> tuple[tuple[int, ...], int, int]:
        return self.cache.chunk_indices(), len(self.cache), memory_bytes(self.cache)


class _ReferenceContext:
    """Brute-force conditioning: retain every interim latent, recompute K/V."""

    def __init__(self, cfg: PipelineConfig, schedule: NoiseSchedule, denoiser):
        self.cfg = cfg
        self.schedule = schedule
        self.denoiser = denoiser
        self.latents: list[Tensor] = []

    def _window_indices(self, k: int) -> range:
        return range(max(0, k - self.cfg.window_chunks), k)

    def context_for(self, k: int) -> CacheContext:
        idx = list(self._window_indices(k))
        if not idx:
            empty = np.zeros((0, 0, 0, 0), dtype=np.float64)
            return CacheContext(keys=empty, values=empty, chunk_indices=())
        blocks = [self.denoiser.project_kv(self.latents[i]) for i in idx]
        keys = np.concatenate([b[0] for b in blocks], axis=1)
        values = np.concatenate([b[1] for b in blocks], axis=1)
        return CacheContext(keys=keys, values=values, chunk_indices=tuple(idx))

    def stage(self, x: Tensor, rng: Rng) -> Tensor:
        if self.cfg.strict_noisy_cache and self.cfg.forcing_t == 0:
            raise ValueError("diagonal forcing requires nonzero noise")
        return inject_noise(self.schedule, x, self.cfg.forcing_t, rng,
                            vp_form=self.cfg.forcing_vp_form)

    def commit(self, staged: Tensor) -> None:
        self.latents.append(staged)

    def snapshot(self) -> tuple[tuple[int, ...], int, int]:
        n = len(self.latents)
        idx = tuple(range(max(0, n - self.cfg.window_chunks), n))
        return idx, len(idx), 0


def _chunk_shape(denoiser) -> tuple[int, int, int, int]:
    try:
        return (denoiser.frames_per_chunk, denoiser.channels,
                denoiser.height, denoiser.width)
    except AttributeError as exc:
        raise TypeError("denoiser must expose frames_per_chunk/channels/height/width") from exc


def _with_transient(ctx: CacheContext, denoiser, prev_output: Tensor,
                    prev_index: int) -> CacheContext:
    keys, values = denoiser.project_kv(prev_output)
    if ctx.keys.size == 0:
        return CacheContext(keys=keys, values=values, chunk_indices=(prev_index,))
    return CacheContext(
        keys=np.concatenate([ctx.keys, keys], axis=1),
        values=np.concatenate([ctx.values, values], axis=1),
        chunk_indices=ctx.chunk_indices + (prev_index,))


def _run(cfg: PipelineConfig, denoiser, schedule: NoiseSchedule, cond,
         provider) -> GenerationResult:
    steps_list = _resolve_steps(cfg)
    ext_start = _extension_start(cfg, steps_list)
    shape = _chunk_shape(denoiser)
    rng = Rng(cfg.seed, stream=0)
    result = GenerationResult()
    prev_output: Tensor | None = None
    for k, s in enumerate(steps_list):
        ts = timesteps_for(s, policy=cfg.timestep_policy)
        ctx = provider.context_for(k)
        phase = "extension" if k >= ext_start else "base"
        if phase == "extension" and prev_output is not None:
            ctx = _with_transient(ctx, denoiser, prev_output, k - 1)
        x = gaussian_sample(rng, shape)
        staged = None
        for i in range(s):
            t_next = ts[i + 1] if i + 1 < s else 0
            x = denoise_step(schedule, denoiser, x, ts[i], t_next, ctx, cond, rng,
                             deterministic_renoise=cfg.deterministic_renoise)
            if i == s - 2:
                staged = provider.stage(x, rng)
        if staged is None:  # single-step chunk: the prediction is the interim latent
            staged = provider.stage(x, rng)
        last = k == len(steps_list) - 1
        if cfg.mix_outputs and (cfg.mix_last or not last):
            out = mix(x, cfg.forcing_t, schedule, rng, vp_form=cfg.forcing_vp_form)
        else:
            out = x
        provider.commit(staged)
        cache_idx, cache_len, cache_mem = provider.snapshot()
        result.chunks.append(out)
        result.logs.append(ChunkLog(
            chunk_index=k, steps=s, timesteps=tuple(ts), phase=phase,
            forcing_t=cfg.forcing_t, context_indices=ctx.chunk_indices,
            cache_indices_after=cache_idx, cache_len_after=cache_len,
            cache_memory_bytes=cache_mem))
        prev_output = out
    return result


def generate(cfg: PipelineConfig, denoiser, schedule: NoiseSchedule,
             cond: Tensor | None = None) -> GenerationResult:
    """Diagonal denoising with the noisy rolling KV cache."""
    return _run(cfg, denoiser, schedule, cond, _DiagonalContext(cfg, schedule, denoiser))


def reference_generate(cfg: PipelineConfig, denoiser, schedule: NoiseSchedule,
                       cond: Tensor | None = None) -> GenerationResult:
    """Oracle pipeline: identical conditioning semantics, no rolling cache."""
    return _run(cfg, denoiser, schedule, cond, _ReferenceContext(cfg, schedule, denoiser))
