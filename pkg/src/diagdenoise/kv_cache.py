"""Bounded rolling cache of per-chunk K/V blocks built from noise-injected latents.

The cache is a value type: cache_noisy_result returns a new cache, which lets
the pipeline keep conditioning each step of chunk k on the pre-insert state
while the chunk's own entry is already built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor
from .schedule import NoiseSchedule, inject_noise


@dataclass(frozen=True)
class CacheEntry:
    chunk_index: int
    keys: Tensor    # [layers, tokens, heads, head_dim]
    values: Tensor
    noise_level_t: int


@dataclass(frozen=True)
class CacheContext:
    """Read-only concatenation of cached K/V, oldest chunk first."""

    keys: Tensor    # [layers, total_tokens, heads, head_dim]
    values: Tensor
    chunk_indices: tuple[int, ...]


@dataclass(frozen=True)
class KVCache:
    window_chunks: int = 4
    entries: tuple[CacheEntry, ...] = ()

    def __post_init__(self):
        if self.window_chunks < 1:
            raise ValueError("window_chunks must be >= 1")
        if len(self.entries) > self.window_chunks:
            raise ValueError("cache exceeds its window")
        idx = [e.chunk_index for e in self.entries]
        if any(b != a + 1 for a, b in zip(idx, idx[1:])):
            raise ValueError("cache entries must have consecutive chunk indices")

    def __len__(self) -> int:
        return len(self.entries)

    def chunk_indices(self) -> tuple[int, ...]:
        return tuple(e.chunk_index for e in self.entries)


def cache_noisy_result(cache: KVCache, x: Tensor, t_force: int, schedule: NoiseSchedule,
                       denoiser, rng: Rng, vp_form: bool = False,
                       strict: bool = True) -> KVCache:
    """Noise-inject the chunk's designated intermediate latent at t_force, run the
    denoiser's K/V projection on it, append the entry, evict beyond the window."""
    if hasattr(x, "data") and not isinstance(x, np.ndarray):  # accept LatentChunk
        x = x.data
    if strict and t_force == 0:
        raise ValueError("diagonal forcing requires nonzero noise")
    noised = inject_noise(schedule, x, t_force, rng, vp_form=vp_form)
    keys, values = denoiser.project_kv(noised)
    if cache.entries and keys.shape != cache.entries[-1].keys.shape:
        raise ValueError("entry K/V shape differs from existing cache entries")
    next_index = cache.entries[-1].chunk_index + 1 if cache.entries else 0
    entry = CacheEntry(chunk_index=next_index, keys=keys, values=values,
                       noise_level_t=int(t_force))
    entries = cache.entries + (entry,)
    if len(entries) > cache.window_chunks:
        entries = entries[1:]
    return KVCache(window_chunks=cache.window_chunks, entries=entries)


def memory_bytes(cache: KVCache, bytes_per_scalar: int = 4) -> int:
    """Exact cache footprint: K and V blocks of every surviving entry."""
    total = 0
    for e in cache.entries:
        layers, tokens, heads, head_dim = e.keys.shape
        total += layers * tokens * heads * head_dim * 2 * bytes_per_scalar
    return total


def gather_context(cache: KVCache) -> CacheContext:
    """Concatenated K/V views ordered oldest to newest; never mutates the cache."""
    if not cache.entries:
        empty = np.zeros((0, 0, 0, 0), dtype=np.float64)
        return CacheContext(keys=empty, values=empty, chunk_indices=())
    keys = np.concatenate([e.keys for e in cache.entries], axis=1)
    values = np.concatenate([e.values for e in cache.entries], axis=1)
    return CacheContext(keys=keys, values=values,
                        chunk_indices=cache.chunk_indices())
