"""Pluggable denoiser contract plus a toy chunk-causal attention network.

The toy model treats every latent pixel of a chunk as a token. Attention is
bidirectional inside the chunk; causality exists only at chunk granularity via
the key/value context prepended from the rolling cache. K/V projection for the
cache is a context-free pass over the chunk alone so that cached blocks can be
recomputed from stored latents bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .numerics import Rng, Tensor, ensure_finite
from .schedule import NoiseSchedule, alpha, shift_timestep, sigma


@dataclass(frozen=True)
class LatentChunk:
    """One [frames, channels, height, width] block, the unit of generation."""

    data: Tensor

    def __post_init__(self):
        if np.ndim(self.data) != 4:
            raise ValueError("latent chunk must be [frames, channels, height, width]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@runtime_checkable
class Denoiser(Protocol):
    """Behavioral contract the pipeline relies on."""

    def predict(self, x_t: Tensor, t: float, ctx, cond: Tensor | None) -> Tensor:
        """Velocity prediction of the same shape as x_t; deterministic."""
        ...

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Per-layer keys/values of shape [layers, tokens, heads, head_dim]."""
        ...


def _rms(h: Tensor) -> Tensor:
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-8)


def _time_features(u: float, n_pairs: int = 4) -> Tensor:
    # u in [0, 1]; sin/cos features at octave frequencies
    freqs = np.pi * (2.0 ** np.arange(n_pairs))
    return np.concatenate([np.sin(freqs * u), np.cos(freqs * u)])


class ToyCausalDiT:
    """Tiny seeded transformer implementing the Denoiser contract.

    All weights are drawn once from the model seed (uniform in +-0.1) and are
    never mutated; context attention is read-only.
    """

    def __init__(self, d_model: int = 16, layers: int = 2, heads: int = 2,
                 frames_per_chunk: int = 3, channels: int = 4, height: int = 8,
                 width: int = 8, cond_dim: int = 8, model_seed: int = 0,
                 zero_weights: bool = False):
        if d_model % heads != 0:
            raise ValueError("heads must divide d_model")
        self.d_model = d_model
        self.layers = layers
        self.heads = heads
        self.head_dim = d_model // heads
        self.frames_per_chunk = frames_per_chunk
        self.channels = channels
        self.height = height
        self.width = width
        self.cond_dim = cond_dim
        self.model_seed = model_seed
        self.tokens_per_chunk = frames_per_chunk * height * width
        self.t_feat_dim = 8

        rng = Rng(model_seed, stream=0)

        def w(*shape):
            if zero_weights:
                return np.zeros(shape, dtype=np.float64)
            return (rng.uniform(int(np.prod(shape))).reshape(shape) - 0.5) * 0.2

        d, dff = d_model, 2 * d_model
        self.w_embed = w(channels, d)
        self.b_embed = w(d)
        self.pos = w(self.tokens_per_chunk, d)
        self.w_cond = w(cond_dim, d)
        self.blocks = []
        for _ in range(layers):
            self.blocks.append({
                "wq": w(d, d), "wk": w(d, d), "wv": w(d, d), "wo": w(d, d),
                "w1": w(d, dff), "b1": w(dff), "w2": w(dff, d), "b2": w(d),
                "wt": w(self.t_feat_dim, d),
            })
        self.w_out = w(d, channels)
        self.b_out = w(channels)

    # -- token plumbing -----------------------------------------------------

    def _embed(self, x: Tensor) -> Tensor:
        if x.shape != (self.frames_per_chunk, self.channels, self.height, self.width):
            raise ValueError(f"chunk shape {x.shape} does not match model configuration")
        pixels = x.transpose(0, 2, 3, 1).reshape(-1, self.channels)
        return pixels @ self.w_embed + self.b_embed + self.pos

    def _unembed(self, h: Tensor) -> Tensor:
        out = h @ self.w_out + self.b_out
        out = out.reshape(self.frames_per_chunk, self.height, self.width, self.channels)
        return out.transpose(0, 3, 1, 2)

    def _split_heads(self, m: Tensor) -> Tensor:
        return m.reshape(m.shape[0], self.heads, self.head_dim)

    def _attend(self, h: Tensor, block: dict, ctx_k: Tensor | None, ctx_v: Tensor | None) -> Tensor:
        hn = _rms(h)
        n = h.shape[0]
        # head-major [heads, tokens, head_dim] so attention is batched matmul
        q = self._split_heads(hn @ block["wq"]).transpose(1, 0, 2)
        k = self._split_heads(hn @ block["wk"]).transpose(1, 0, 2)
        v = self._split_heads(hn @ block["wv"]).transpose(1, 0, 2)
        if ctx_k is not None:
            k = np.concatenate([ctx_k.transpose(1, 0, 2), k], axis=1)
            v = np.concatenate([ctx_v.transpose(1, 0, 2), v], axis=1)
        scores = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(self.head_dim)
        scores -= scores.max(axis=2, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=2, keepdims=True)
        out = np.matmul(w, v).transpose(1, 0, 2).reshape(n, self.d_model)
        return out @ block["wo"]

    def _mlp(self, h: Tensor, block: dict, t_feat: Tensor) -> Tensor:
        mix = _rms(h) + t_feat @ block["wt"]
        return np.tanh(mix @ block["w1"] + block["b1"]) @ block["w2"] + block["b2"]

    def _check_context(self, ctx) -> tuple[Tensor, Tensor] | tuple[None, None]:
        if ctx is None:
            return None, None
        keys, values = ctx.keys, ctx.values
        if keys.shape[0] == 0 or keys.shape[1] == 0:
            return None, None
        expected = (self.layers, keys.shape[1], self.heads, self.head_dim)
        if keys.shape != expected or values.shape != expected:
            raise ValueError(
                f"context shape {keys.shape} incompatible with model {expected}")
        return keys, values

    # -- Denoiser contract --------------------------------------------------

    def predict(self, x_t: Tensor, t: float, ctx=None, cond: Tensor | None = None) -> Tensor:
        ctx_k, ctx_v = self._check_context(ctx)
        h = self._embed(x_t)
        if cond is not None:
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape != (self.cond_dim,):
                raise ValueError(f"condition vector must have length {self.cond_dim}")
            h = h + cond @ self.w_cond
        t_feat = _time_features(float(t) / 1000.0)
        for i, block in enumerate(self.blocks):
            layer_ctx_k = ctx_k[i] if ctx_k is not None else None
            layer_ctx_v = ctx_v[i] if ctx_v is not None else None
            h = h + self._attend(h, block, layer_ctx_k, layer_ctx_v)
            h = h + self._mlp(h, block, t_feat)
        return ensure_finite(self._unembed(h), "denoiser velocity")

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self._embed(x)
        t_feat = _time_features(0.0)
        keys, values = [], []
        for block in self.blocks:
            hn = _rms(h)
            keys.append(self._split_heads(hn @ block["wk"]))
            values.append(self._split_heads(hn @ block["wv"]))
            h = h + self._attend(h, block, None, None)
            h = h + self._mlp(h, block, t_feat)
        return np.stack(keys), np.stack(values)


class OracleDenoiser:
    """Test double that knows the clean chunk and inverts the linear path."""

    def __init__(self, schedule: NoiseSchedule, clean: Tensor):
        self.schedule = schedule
        self.clean = np.asarray(clean, dtype=np.float64)
        self.frames_per_chunk, self.channels, self.height, self.width = self.clean.shape

    def predict(self, x_t: Tensor, t: float, ctx=None, cond=None) -> Tensor:
        sig = sigma(self.schedule, t)
        if sig == 0.0:
            return np.zeros_like(x_t)
        eps = (x_t - (1.0 - sig) * self.clean) / sig
        return eps - self.clean

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        flat = x.reshape(1, -1, 1, 1)
        return flat.copy(), flat.copy()


class CountingDenoiser:
    """Wrapper that counts predict calls (the NFE ledger instrument)."""

    def __init__(self, inner):
        self.inner = inner
        self.predict_calls = 0

    def predict(self, x_t, t, ctx=None, cond=None):
        self.predict_calls += 1
        return self.inner.predict(x_t, t, ctx, cond)

    def project_kv(self, x):
        return self.inner.project_kv(x)

    def __getattr__(self, name):
        return getattr(self.inner, name)


# -- module-level operations on typed chunks --------------------------------

def predict_velocity(model: Denoiser, x_t: LatentChunk, t: float, ctx=None,
                     cond: Tensor | None = None) -> LatentChunk:
    return LatentChunk(model.predict(x_t.data, t, ctx, cond))


def to_data_prediction(s: NoiseSchedule, x_t: Tensor, v: Tensor, t: float) -> Tensor:
    """Data estimate under the velocity-(eps - x) convention: x0 = x_t - sigma(t)*v."""
    return x_t - sigma(s, t) * v


def step(s: NoiseSchedule, model: Denoiser, x_t: Tensor, t_cur: float, t_next: float,
         ctx=None, cond: Tensor | None = None, rng: Rng | None = None,
         deterministic_renoise: bool = False) -> Tensor:
    """One denoising step: predict x0, then re-noise to t_next (x0 itself at t_next=0)."""
    if t_next >= t_cur:
        raise ValueError("timesteps must decrease")
    v = model.predict(x_t, t_cur, ctx, cond)
    x0 = to_data_prediction(s, x_t, v, t_cur)
    ensure_finite(x0, "data prediction")
    if t_next == 0:
        return x0
    a_next, s_next = alpha(s, t_next), sigma(s, t_next)
    if deterministic_renoise:
        s_cur = sigma(s, t_cur)
        eps_hat = (x_t - (1.0 - s_cur) * x0) / s_cur
        return a_next * x0 + s_next * eps_hat
    if rng is None:
        raise ValueError("stochastic re-noising needs an rng")
    from .numerics import gaussian_sample
    return a_next * x0 + s_next * gaussian_sample(rng, x0.shape)


__all__ = [
    "LatentChunk", "Denoiser", "ToyCausalDiT", "OracleDenoiser", "CountingDenoiser",
    "predict_velocity", "to_data_prediction", "step", "shift_timestep",
]
