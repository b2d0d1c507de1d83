"""Distillation training loop: spatial DMD + regression plus flow terms.

Two worlds share one loop:

* gaussian - 1-D analytic world. Real data is N(m, s^2), the generator is
  G(z) = b + z, the teacher map is z -> m + s*z, and the flow channel is the
  identity feature map over the same samples.
* toy - moving-dot latent clips. The generator is a per-frame mean video plus
  per-entry noise gains, G(z)_t = b_t + a_t*z_t + c*z_shared. Diagonal-Gaussian
  spatial scores only see per-entry marginals, so the split between the
  frame-local gains `a` and the frame-shared gain `c` is invisible to the
  spatial terms; the flow terms (statistics of consecutive-frame differences)
  are what resolve it toward real motion.

Real scores are frozen analytic oracles built from clean-data moments. Fake
scores are learned heads refit n_inner times per generator step on current
generator samples: a per-entry affine denoiser for the spatial channel and
per-entry Gaussian moments over normalized motion features for the flow
channel. DMD terms have no primitive loss; the logged L_DMD values are the
surrogate 0.5 * mean(score_difference^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .motion_flow import (EmaLink, MotionExtractor, _backward_diffs, _forward_diffs,
                          ema_update, init_motion_extractor)
from .numerics import Rng, Tensor, gaussian_sample
from .schedule import NoiseSchedule, alpha, sigma
from .synthetic_data import LinearCodec, MovingDotDataset, make_clip

STRATEGIES = ("teacher", "diffusion", "self", "diagonal")


@dataclass(frozen=True)
class LossWeights:
    lambda_spatial: float = 4.0
    lambda_flow: float = 4.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.lambda_spatial, self.lambda_flow, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainBatch:
    zs: Tensor                 # [B, ...] generator noise
    ys: Tensor | None = None   # [B, ...] paired teacher outputs / real clips
    y_indices: Tensor | None = None  # toy mode: row indices into the clip bank


@dataclass
class TrainerConfig:
    mode: str = "gaussian"
    strategy: str = "diagonal"
    seed: int = 0
    steps: int = 500
    batch: int = 512
    lr: float = 0.05
    momentum: float = 0.0
    n_inner: int = 5
    head_lr: float = 0.1
    t_levels: tuple[int, ...] = (100, 400, 700)
    # gaussian world
    real_mean: float = 1.0
    real_std: float = 1.0
    # toy world
    data_seed: int = 0
    n_clips: int = 64
    chunks_per_sample: int = 4
    frames_per_chunk: int = 3
    recency_split: int = 2
    forcing_t: int = 100
    velocity: tuple[float, float] = (1.0, 0.0)
    channels: int = 4
    height: int = 8
    width: int = 8
    c_mid: int = 8
    c_feat: int = 4
    ema_mu: float = 0.999
    extractor_lr: float = 2e-4
    noise_gain_init: float = 0.1
    flow_ref_refresh: int = 25
    flow_repr: str = "learned"

    def __post_init__(self):
        if self.mode not in ("gaussian", "toy"):
            raise ValueError(f"unknown trainer mode {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown conditioning strategy {self.strategy!r}")


# -- generators ---------------------------------------------------------------

class GaussianGenerator:
    """G(z) = b + z over scalar samples; the single parameter is the bias b."""

    def __init__(self, b0: float):
        self.b = np.array([float(b0)])

    def params(self) -> dict[str, Tensor]:
        return {"b": self.b}

    def sample_noise(self, rng: Rng) -> Tensor:
        return gaussian_sample(rng, (1,))

    def sample_noise_batch(self, rng: Rng, n: int) -> Tensor:
        return gaussian_sample(rng, (n, 1))

    def forward(self, z: Tensor) -> Tensor:
        return z + self.b

    def forward_batch(self, zs: Tensor) -> Tensor:
        return zs + self.b

    def param_vjp(self, z: Tensor, upstream: Tensor) -> dict[str, Tensor]:
        return {"b": np.array([upstream.sum()])}

    def param_vjp_batch(self, zs: Tensor, upstreams: Tensor) -> dict[str, Tensor]:
        return {"b": np.array([upstreams.sum()])}


class ClipGenerator:
    """Mean video plus per-entry frame-local and frame-shared noise gains.

    z layout: [F+1, C, H, W]; rows 0..F-1 are per-frame noise, row F is the
    noise map shared by all frames: G(z) = b + a*z[:F] + c*z[F].

    Per-entry marginals only see a^2 + c^2, so diagonal spatial scores cannot
    separate the two gains; consecutive-frame differences cancel c, so the
    flow terms are what push a toward real motion statistics.
    """

    def __init__(self, frames: int, channels: int, height: int, width: int,
                 rng: Rng, noise_gain_init: float = 0.1):
        self.frames = frames
        self.b = 0.01 * gaussian_sample(rng, (frames, channels, height, width))
        self.a = np.full((frames, channels, height, width), noise_gain_init)
        self.c = np.full((channels, height, width), noise_gain_init)

    def params(self) -> dict[str, Tensor]:
        return {"b": self.b, "a": self.a, "c": self.c}

    def sample_noise(self, rng: Rng) -> Tensor:
        f, c, h, w = self.b.shape[0], *self.b.shape[1:]
        return gaussian_sample(rng, (f + 1, c, h, w))

    def sample_noise_batch(self, rng: Rng, n: int) -> Tensor:
        f, c, h, w = self.b.shape[0], *self.b.shape[1:]
        return gaussian_sample(rng, (n, f + 1, c, h, w))

    def forward(self, z: Tensor) -> Tensor:
        return self.b + self.a * z[:-1] + self.c * z[-1][None]

    def forward_batch(self, zs: Tensor) -> Tensor:
        return self.b[None] + self.a * zs[:, :-1] + self.c * zs[:, -1][:, None]

    def param_vjp(self, z: Tensor, upstream: Tensor) -> dict[str, Tensor]:
        return {
            "b": upstream.copy(),
            "a": upstream * z[:-1],
            "c": (upstream * z[-1][None]).sum(axis=0),
        }

    def param_vjp_batch(self, zs: Tensor, upstreams: Tensor) -> dict[str, Tensor]:
        return {
            "b": upstreams.sum(axis=0),
            "a": (upstreams * zs[:, :-1]).sum(axis=0),
            "c": (upstreams * zs[:, -1][:, None]).sum(axis=(0, 1)),
        }


# -- score heads --------------------------------------------------------------

class AffineHead:
    """Per-entry affine denoiser mu(x) = u*x + w; its induced score is
    -(x - alpha*mu(x)) / sigma^2."""

    def __init__(self, shape: tuple[int, ...]):
        self.u = np.zeros(shape)
        self.w = np.zeros(shape)

    def mu(self, x: Tensor) -> Tensor:
        return self.u * x + self.w

    def score(self, schedule: NoiseSchedule, x_t: Tensor, t: float) -> Tensor:
        a, s = alpha(schedule, t), sigma(schedule, t)
        return -(x_t - a * self.mu(x_t)) / (s * s)

    def fit_grads(self, clean: Tensor, noised: Tensor) -> tuple[Tensor, Tensor]:
        """Gradients of the per-entry denoising regression.

        clean/noised are [B, ...]; each entry's (u, w) pair solves its own
        scalar regression mean_batch((u*x + w - y)^2), so gradients average
        over the batch only."""
        r = self.u * noised + self.w - clean
        return 2.0 * (r * noised).mean(axis=0), 2.0 * r.mean(axis=0)

    def fit_step(self, clean: Tensor, noised: Tensor, lr: float) -> float:
        du, dw = self.fit_grads(clean, noised)
        self.u -= lr * du
        self.w -= lr * dw
        r = self.u * noised + self.w - clean
        return float(np.mean(r * r))


class AnalyticRealScore:
    """Frozen diagonal-Gaussian score of diffused clean data N(mean0, var0)."""

    def __init__(self, mean0: Tensor, var0: Tensor):
        self.mean0 = np.asarray(mean0, dtype=np.float64)
        self.var0 = np.asarray(var0, dtype=np.float64)

    def score(self, schedule: NoiseSchedule, x_t: Tensor, t: float) -> Tensor:
        a, s = alpha(schedule, t), sigma(schedule, t)
        return -(x_t - a * self.mean0) / (a * a * self.var0 + s * s)


class GaussianFeatureScore:
    """Diagonal-Gaussian score fitted directly to noised-feature moments."""

    def __init__(self, mean: Tensor, var: Tensor):
        self.mean = mean
        self.var = np.maximum(var, 1e-3)

    def score(self, f: Tensor) -> Tensor:
        return -(f - self.mean) / self.var


class FlowMomentHead:
    """Learned fake flow score: per-entry Gaussian moments fit by SGD.

    The diagonal-Gaussian score-matching optimum is the batch moments, so each
    fit step is a quadratic SGD step of the per-entry parameters toward them.
    The head doubles as the feature denoiser (its clean-feature estimate is
    the learned mean)."""

    def __init__(self, shape: tuple[int, ...]):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)

    def fit_step(self, feats: Tensor, lr: float) -> None:
        bm = feats.mean(axis=0)
        bv = feats.var(axis=0)
        self.mean -= lr * 2.0 * (self.mean - bm)
        self.var -= lr * 2.0 * (self.var - bv)

    def score(self, f: Tensor) -> Tensor:
        return -(f - self.mean) / np.maximum(self.var, 1e-3)

    def mu_flow(self, f: Tensor) -> Tensor:
        return np.broadcast_to(self.mean, f.shape)


# -- conditioning -------------------------------------------------------------

def build_conditioning(strategy: str, clean_history: Sequence[Tensor],
                       generated_history: Sequence[Tensor], forcing_t: int,
                       schedule: NoiseSchedule, rng: Rng,
                       recency_split: int = 2) -> list[Tensor]:
    """Assemble the conditioning view of past chunks for one training sample.

    teacher   -> clean ground truth
    diffusion -> ground truth noised at forcing_t
    self      -> the model's own outputs
    diagonal  -> the most recent `recency_split` chunks are model outputs
                 noised at forcing_t, older chunks are clean ground truth
    """
    from .schedule import inject_noise
    clean = list(clean_history)
    generated = list(generated_history)
    if strategy == "teacher":
        return [c.copy() for c in clean]
    if strategy == "diffusion":
        return [inject_noise(schedule, c, forcing_t, rng) for c in clean]
    if strategy == "self":
        if len(generated) != len(clean):
            raise ValueError("self forcing needs a full generated history")
        return [g.copy() for g in generated]
    if strategy == "diagonal":
        if not generated:
            return [c.copy() for c in clean]  # degenerates to teacher forcing
        n_recent = min(recency_split, len(generated), len(clean))
        out = [c.copy() for c in clean[:len(clean) - n_recent]]
        for g in generated[len(generated) - n_recent:]:
            out.append(inject_noise(schedule, g, forcing_t, rng))
        return out
    raise ValueError(f"unknown conditioning strategy {strategy!r}")


# -- trainer state ------------------------------------------------------------

@dataclass
class TrainerState:
    cfg: TrainerConfig
    generator: GaussianGenerator | ClipGenerator
    fake_spatial: dict[int, AffineHead]
    fake_flow: dict[int, FlowMomentHead]
    real_spatial: AnalyticRealScore
    student: MotionExtractor | None
    teacher: MotionExtractor | None
    ema: EmaLink
    step_count: int = 0
    velocity_buf: dict[str, Tensor] = field(default_factory=dict)
    # toy world extras
    codec: LinearCodec | None = None
    real_clips: Tensor | None = None          # [N, F, C, H, W]
    flow_ref_clean: Tensor | None = None      # fixed subset used for flow moments
    flow_ref_eps: dict[int, Tensor] | None = None
    feat_norm: Tensor | None = None           # frozen per-entry feature normalizer
    _flow_real_cache: dict = field(default_factory=dict)

    def real_score_params(self) -> dict[str, Tensor]:
        return {"mean0": self.real_spatial.mean0, "var0": self.real_spatial.var0}

    def pick_level(self, rng: Rng) -> int:
        levels = self.cfg.t_levels
        idx = int(rng.raw(1)[0] % np.uint64(len(levels)))
        return int(levels[idx])


def _clip_frames(cfg: TrainerConfig) -> int:
    return cfg.chunks_per_sample * cfg.frames_per_chunk


def init_trainer(cfg: TrainerConfig, schedule: NoiseSchedule | None = None) -> TrainerState:
    schedule = schedule or NoiseSchedule()
    rng = Rng(cfg.seed, stream=2)
    if cfg.mode == "gaussian":
        b0 = float((rng.uniform(1)[0] - 0.5) * 4.0)  # uniform in [-2, 2]
        gen = GaussianGenerator(b0)
        state = TrainerState(
            cfg=cfg, generator=gen,
            fake_spatial={t: AffineHead((1,)) for t in cfg.t_levels},
            fake_flow={t: FlowMomentHead((1,)) for t in cfg.t_levels},
            real_spatial=AnalyticRealScore(np.array([cfg.real_mean]),
                                           np.array([cfg.real_std ** 2])),
            student=None, teacher=None, ema=EmaLink(cfg.ema_mu))
        return state

    if cfg.flow_repr != "learned":
        raise ValueError("training flow terms require flow_repr='learned'")
    frames = _clip_frames(cfg)
    ds = MovingDotDataset(height=cfg.height, width=cfg.width,
                          velocity=cfg.velocity, frames=frames, seed=cfg.data_seed)
    codec = LinearCodec(height=cfg.height, width=cfg.width,
                        channels=cfg.channels, seed=1234)
    clips = np.stack([codec.encode(make_clip(ds, i)) for i in range(cfg.n_clips)])
    # spatial stats are pooled across frames (frame-exchangeable): the spatial
    # channel carries no temporal signal, the flow channel is the only path
    # that sees consecutive-frame statistics
    mean0 = clips.mean(axis=(0, 1))
    var0 = np.maximum(clips.reshape(-1, *clips.shape[2:]).var(axis=0), 1e-3)
    gen = ClipGenerator(frames, cfg.channels, cfg.height, cfg.width, rng,
                        noise_gain_init=cfg.noise_gain_init)
    student = init_motion_extractor(cfg.channels, cfg.c_mid, cfg.c_feat,
                                    seed=cfg.seed + 17, role="student")
    teacher = replace(student, role="teacher")
    feat_shape = (frames - 1, cfg.c_feat, cfg.height, cfg.width)
    ref_rng = Rng(cfg.seed, stream=4)
    n_ref = min(48, cfg.n_clips)
    ref_clean = clips[:n_ref]
    ref_eps = {t: gaussian_sample(ref_rng, ref_clean.shape) for t in cfg.t_levels}
    # frozen per-entry normalizer so features are O(1) on both sides
    raw_ref = _features_batch(teacher, ref_clean)
    feat_norm = np.maximum(raw_ref.std(axis=0), 1e-2)
    return TrainerState(
        cfg=cfg, generator=gen,
        fake_spatial={t: AffineHead(mean0.shape) for t in cfg.t_levels},  # [C,H,W], frame-pooled
        fake_flow={t: FlowMomentHead(feat_shape) for t in cfg.t_levels},
        real_spatial=AnalyticRealScore(mean0, var0),
        student=student, teacher=teacher, ema=EmaLink(cfg.ema_mu),
        codec=codec, real_clips=clips,
        flow_ref_clean=ref_clean, flow_ref_eps=ref_eps, feat_norm=feat_norm)


def sample_batch(state: TrainerState, rng: Rng) -> TrainBatch:
    cfg = state.cfg
    if cfg.mode == "gaussian":
        zs = state.generator.sample_noise_batch(rng, cfg.batch)
        ys = cfg.real_mean + cfg.real_std * zs  # analytic teacher map
        return TrainBatch(zs=zs, ys=ys)
    zs = state.generator.sample_noise_batch(rng, cfg.batch)
    idx = (rng.raw(cfg.batch) % np.uint64(state.real_clips.shape[0])).astype(np.int64)
    return TrainBatch(zs=zs, ys=state.real_clips[idx], y_indices=idx)


# -- batched extractor helpers ------------------------------------------------

def _features_batch(extractor: MotionExtractor, videos: Tensor) -> Tensor:
    """Features of a stack of videos [B, F, C, H, W] -> [B, F-1, c_feat, H, W]."""
    b, f = videos.shape[0], videos.shape[1]
    diffs = (videos[:, 1:] - videos[:, :-1]).reshape((b * (f - 1),) + videos.shape[2:])
    out, _ = _forward_diffs(extractor, diffs)
    return out.reshape((b, f - 1) + out.shape[1:])


def _features_vjp_batch(extractor: MotionExtractor, videos: Tensor,
                        upstream: Tensor) -> tuple[Tensor, dict]:
    b, f = videos.shape[0], videos.shape[1]
    diffs = (videos[:, 1:] - videos[:, :-1]).reshape((b * (f - 1),) + videos.shape[2:])
    _, cache = _forward_diffs(extractor, diffs)
    dd, grads = _backward_diffs(extractor, cache,
                                upstream.reshape((b * (f - 1),) + upstream.shape[2:]))
    dd = dd.reshape((b, f - 1) + videos.shape[2:])
    dv = np.zeros_like(videos)
    dv[:, 1:] += dd
    dv[:, :-1] -= dd
    return dv, grads


def _tfeat(state: TrainerState, extractor: MotionExtractor, videos: Tensor) -> Tensor:
    """Normalized features (frozen per-entry scale, applied on both sides)."""
    return _features_batch(extractor, videos) / state.feat_norm


def _tfeat_fwd(state: TrainerState, extractor: MotionExtractor, videos: Tensor
               ) -> tuple[Tensor, tuple]:
    """Normalized features plus the backprop cache (no recompute in the VJP)."""
    b, f = videos.shape[0], videos.shape[1]
    diffs = (videos[:, 1:] - videos[:, :-1]).reshape((b * (f - 1),) + videos.shape[2:])
    raw, cache = _forward_diffs(extractor, diffs)
    feats = raw.reshape((b, f - 1) + raw.shape[1:]) / state.feat_norm
    return feats, cache


def _tfeat_bwd(state: TrainerState, extractor: MotionExtractor, cache: tuple,
               video_shape: tuple, upstream: Tensor) -> tuple[Tensor, dict]:
    b, f = video_shape[0], video_shape[1]
    up = (upstream / state.feat_norm).reshape((b * (f - 1),) + upstream.shape[2:])
    dd, grads = _backward_diffs(extractor, cache, up)
    dd = dd.reshape((b, f - 1) + video_shape[2:])
    dv = np.zeros(video_shape)
    dv[:, 1:] += dd
    dv[:, :-1] -= dd
    return dv, grads


def _tfeat_vjp(state: TrainerState, extractor: MotionExtractor, videos: Tensor,
               upstream: Tensor) -> tuple[Tensor, dict]:
    return _features_vjp_batch(extractor, videos, upstream / state.feat_norm)


def _diffuse_batch(schedule: NoiseSchedule, x: Tensor, t: float, rng: Rng) -> Tensor:
    sig = sigma(schedule, t)
    eps = gaussian_sample(rng, x.shape)
    return (1.0 - sig) * x + sig * eps


def _assemble_sequences(state: TrainerState, batch: TrainBatch, gs: Tensor,
                        schedule: NoiseSchedule, rng: Rng) -> tuple[Tensor, Tensor]:
    """Conditioning view per sample: [history-per-strategy || generated current].

    History spans the first half of the clip's chunks; the strategy decides
    which version of those chunks the flow terms see. Returns (sequences
    [B, F, C, H, W], frame mask [F]) where the mask selects the frames that
    backpropagate into the generator (history is detached context).
    """
    cfg = state.cfg
    fpc = cfg.frames_per_chunk
    n_hist = min(max(cfg.chunks_per_sample // 2, 1), cfg.chunks_per_sample - 1)
    seqs = np.empty_like(gs)
    for i in range(gs.shape[0]):
        clean_chunks = [batch.ys[i, k * fpc:(k + 1) * fpc] for k in range(n_hist)]
        gen_chunks = [gs[i, k * fpc:(k + 1) * fpc] for k in range(n_hist)]
        cond = build_conditioning(cfg.strategy, clean_chunks, gen_chunks,
                                  cfg.forcing_t, schedule, rng,
                                  recency_split=cfg.recency_split)
        seqs[i, :n_hist * fpc] = np.concatenate(cond, axis=0)
        seqs[i, n_hist * fpc:] = gs[i, n_hist * fpc:]
    mask = np.zeros(gs.shape[1])
    mask[n_hist * fpc:] = 1.0
    return seqs, mask


# -- public training operations ------------------------------------------------

def dmd_gradient(state: TrainerState, batch: TrainBatch, schedule: NoiseSchedule,
                 rng: Rng, t: int | None = None) -> tuple[dict[str, Tensor], float]:
    """Spatial DMD generator gradient (Monte Carlo over the batch).

    Per sample: diffuse the generator output at t, take s_real - s_fake, chain
    through dG/dphi. Returns (gradient dict, logged surrogate value)."""
    if t is None:
        t = state.pick_level(rng)
    gen = state.generator
    gs = gen.forward_batch(batch.zs)
    x_t = _diffuse_batch(schedule, gs, t, rng)
    sdiff = (state.real_spatial.score(schedule, x_t, t)
             - state.fake_spatial[t].score(schedule, x_t, t))
    # per-entry-mean normalization keeps all four loss terms on one scale
    grads = gen.param_vjp_batch(batch.zs, -alpha(schedule, t) * sdiff / sdiff.size)
    surrogate = 0.5 * float(np.mean(sdiff * sdiff))
    return grads, surrogate


def regression_loss(state: TrainerState, batch: TrainBatch
                    ) -> tuple[float, dict[str, Tensor]]:
    """Paired regression mean over samples of mean((G(z) - y)^2)."""
    if batch.ys is None or batch.ys.shape[0] != batch.zs.shape[0]:
        raise ValueError("regression needs a paired (z, y) batch")
    gen = state.generator
    gs = gen.forward_batch(batch.zs)
    r = gs - batch.ys
    n, per = r.shape[0], r[0].size
    loss = float(np.mean(r * r))
    grads = gen.param_vjp_batch(batch.zs, 2.0 * r / (n * per))
    return loss, grads


def _flow_dmd_term(state: TrainerState, batch: TrainBatch, gs: Tensor,
                   seqs: Tensor, mask: Tensor | None, schedule: NoiseSchedule,
                   rng: Rng, t: int) -> tuple[dict[str, Tensor], float]:
    """Flow DMD gradient over conditioned sequences (toy) or samples (gaussian)."""
    gen = state.generator
    if state.cfg.mode == "gaussian":
        x_t = _diffuse_batch(schedule, gs, t, rng)
        real = _gaussian_flow_real(state, schedule, x_t, t)
        sdiff = real - state.fake_flow[t].score(x_t)
        grads = gen.param_vjp_batch(batch.zs, -alpha(schedule, t) * sdiff / sdiff.size)
        return grads, 0.5 * float(np.mean(sdiff * sdiff))
    x_t = _diffuse_batch(schedule, seqs, t, rng)
    feats, cache = _tfeat_fwd(state, state.teacher, x_t)
    real = _toy_flow_real_score(state, schedule, t)
    sdiff = real.score(feats) - state.fake_flow[t].score(feats)
    dvideo, _ = _tfeat_bwd(state, state.teacher, cache, x_t.shape, sdiff / feats.size)
    upstream = -alpha(schedule, t) * dvideo * mask[None, :, None, None, None]
    grads = gen.param_vjp_batch(batch.zs, upstream)
    return grads, 0.5 * float(np.mean(sdiff * sdiff))


def _gaussian_flow_real(state: TrainerState, schedule: NoiseSchedule,
                        x_t: Tensor, t: float) -> Tensor:
    a, s = alpha(schedule, t), sigma(schedule, t)
    var = a * a * state.cfg.real_std ** 2 + s * s
    return -(x_t - a * state.cfg.real_mean) / var


def _real_clip_features(state: TrainerState) -> Tensor:
    """Teacher features of the whole clip bank, refreshed on the same cadence
    as the real flow moments (the teacher drifts slowly under EMA)."""
    cached = state._flow_real_cache.get("clip_feats")
    if cached is not None and state.step_count - cached[0] < state.cfg.flow_ref_refresh:
        return cached[1]
    feats = _tfeat(state, state.teacher, state.real_clips)
    state._flow_real_cache["clip_feats"] = (state.step_count, feats)
    return feats


def _toy_flow_real_score(state: TrainerState, schedule: NoiseSchedule,
                         t: int) -> GaussianFeatureScore:
    """Moment-matched score of real flow features at level t, through the
    current EMA teacher, over the fixed pre-noised reference set. The teacher
    drifts slowly (EMA), so the moments are refreshed every
    flow_ref_refresh steps rather than recomputed per step."""
    cached = state._flow_real_cache.get(t)
    if cached is not None and state.step_count - cached[0] < state.cfg.flow_ref_refresh:
        return cached[1]
    sig = sigma(schedule, t)
    noised = (1.0 - sig) * state.flow_ref_clean + sig * state.flow_ref_eps[t]
    feats = _tfeat(state, state.teacher, noised)
    score = GaussianFeatureScore(feats.mean(axis=0), feats.var(axis=0))
    state._flow_real_cache[t] = (state.step_count, score)
    return score


def _flow_regression_term(state: TrainerState, batch: TrainBatch, gs: Tensor,
                          seqs: Tensor, mask: Tensor | None
                          ) -> tuple[float, dict[str, Tensor], dict[str, Tensor]]:
    """Flow regression: align student features of the conditioned sequences with
    teacher features of the paired real clips. Returns (loss, generator grads,
    student extractor grads)."""
    gen = state.generator
    n = batch.zs.shape[0]
    if state.cfg.mode == "gaussian":
        r = gs - batch.ys
        loss = float(np.mean(r * r))
        grads = gen.param_vjp_batch(batch.zs, 2.0 * r / (n * r[0].size))
        return loss, grads, {}
    f_t = _real_clip_features(state)[batch.y_indices]
    f_s, cache = _tfeat_fwd(state, state.student, seqs)
    resid = f_s - f_t
    loss = float(np.mean(resid * resid))
    upstream = 2.0 * resid / resid.size
    dseq, ext_grads = _tfeat_bwd(state, state.student, cache, seqs.shape, upstream)
    gen_grads = gen.param_vjp_batch(batch.zs, dseq * mask[None, :, None, None, None])
    return loss, gen_grads, ext_grads


def _fit_fake_heads(state: TrainerState, batch: TrainBatch, gs: Tensor,
                    seqs: Tensor, schedule: NoiseSchedule, rng: Rng, t: int) -> None:
    cfg = state.cfg
    if cfg.mode == "gaussian":
        flow_samples = _diffuse_batch(schedule, gs, t, rng)
        clean_frames = gs
    else:
        noised_seq = _diffuse_batch(schedule, seqs, t, rng)
        flow_samples = _tfeat(state, state.teacher, noised_seq)
        # spatial head is frame-pooled: frames join the batch axis
        clean_frames = gs.reshape((-1,) + gs.shape[2:])
    for _ in range(cfg.n_inner):
        noised = _diffuse_batch(schedule, gs, t, rng)
        if cfg.mode != "gaussian":
            noised = noised.reshape((-1,) + gs.shape[2:])
        state.fake_spatial[t].fit_step(clean_frames, noised, cfg.head_lr)
        state.fake_flow[t].fit_step(flow_samples, cfg.head_lr)


def _apply_sgd(state: TrainerState, grads: dict[str, Tensor]) -> dict[str, Tensor]:
    cfg = state.cfg
    params = state.generator.params()
    applied = {}
    for name, g in grads.items():
        if cfg.momentum > 0:
            buf = state.velocity_buf.get(name)
            buf = g if buf is None else cfg.momentum * buf + g
            state.velocity_buf[name] = buf
            g = buf
        delta = cfg.lr * g
        params[name] -= delta
        applied[name] = delta
    return applied


def total_loss_step(state: TrainerState, batch: TrainBatch, weights: LossWeights,
                    schedule: NoiseSchedule, rng: Rng
                    ) -> tuple[TrainerState, dict[str, float]]:
    """One alternating update: refit fake heads, apply the combined generator
    gradient, EMA-update the flow teacher. Returns the state and the loss
    breakdown (flow terms are always evaluated for the log, but contribute to
    the applied update only scaled by gamma)."""
    cfg = state.cfg
    t = state.pick_level(rng)
    gs = state.generator.forward_batch(batch.zs)
    if cfg.mode == "toy":
        seqs, mask = _assemble_sequences(state, batch, gs, schedule, rng)
    else:
        seqs, mask = gs, None

    _fit_fake_heads(state, batch, gs, seqs, schedule, rng, t)

    g_dmd, l_dmd = dmd_gradient(state, batch, schedule, rng, t=t)
    l_reg, g_reg = regression_loss(state, batch)
    g_dmdf, l_dmdf = _flow_dmd_term(state, batch, gs, seqs, mask, schedule, rng, t)
    l_regf, g_regf, ext_grads = _flow_regression_term(state, batch, gs, seqs, mask)

    breakdown = {
        "L_DMD": l_dmd, "L_reg": l_reg,
        "L_DMD_flow": l_dmdf, "L_reg_flow": l_regf,
    }
    breakdown["total"] = (weights.lambda_spatial * l_dmd + l_reg
                          + weights.gamma * (weights.lambda_flow * l_dmdf + l_regf))
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name}: {value!r} "
                                     f"(breakdown={breakdown})")

    total = {}
    for name in state.generator.params():
        total[name] = (weights.lambda_spatial * g_dmd[name] + g_reg[name]
                       + weights.gamma * (weights.lambda_flow * g_dmdf[name]
                                          + g_regf[name]))
    _apply_sgd(state, total)

    if cfg.mode == "toy" and weights.gamma > 0 and ext_grads:
        new_params = {n: p - cfg.extractor_lr * weights.gamma * ext_grads[n]
                      for n, p in state.student.params().items()}
        state.student = state.student.with_params(new_params)
    if state.teacher is not None:
        state.teacher = ema_update(state.ema, state.teacher, state.student)

    if cfg.mode == "gaussian":
        breakdown["bias_gap"] = abs(float(state.generator.b[0]) - cfg.real_mean)
    state.step_count += 1
    return state, breakdown


def run_training(cfg: TrainerConfig, weights: LossWeights | None = None,
                 schedule: NoiseSchedule | None = None
                 ) -> tuple[TrainerState, list[dict[str, float]]]:
    """Full deterministic training run; returns final state and per-step logs."""
    weights = weights or LossWeights()
    schedule = schedule or NoiseSchedule()
    state = init_trainer(cfg, schedule)
    rng = Rng(cfg.seed, stream=3)
    rows = []
    for i in range(cfg.steps):
        batch = sample_batch(state, rng)
        state, breakdown = total_loss_step(state, batch, weights, schedule, rng)
        breakdown["step"] = i
        rows.append(breakdown)
    return state, rows


def generated_motion_amplitude(state: TrainerState, rng: Rng, n_samples: int = 16) -> float:
    """Mean motion amplitude of decoded generator samples (toy mode only)."""
    from .synthetic_data import motion_amplitude
    if state.cfg.mode != "toy":
        raise ValueError("motion amplitude applies to toy mode")
    amps = []
    for _ in range(n_samples):
        z = state.generator.sample_noise(rng)
        clip = state.generator.forward(z)
        amps.append(motion_amplitude(state.codec.decode(clip)))
    return float(np.mean(amps))
