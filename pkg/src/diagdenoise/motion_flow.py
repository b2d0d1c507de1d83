"""Flow-distribution-matching machinery: motion extractor, EMA pairing, losses.

The extractor is conv(3x3) -> tanh -> conv(3x3) -> per-pixel MLP over
consecutive latent-frame differences. All gradients here are hand-derived
(conv/MLP backprop written out) and certified against the central-difference
oracle in numerics.

Biases are zero-initialized and tanh fixes zero, so a static video maps to
exactly zero features at init; frame differencing makes every variant
invariant to adding a constant to all frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .numerics import Rng, Tensor
from .schedule import NoiseSchedule, alpha, forward_diffuse, score_from_denoised

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b")


@dataclass(frozen=True)
class MotionExtractor:
    conv1_w: Tensor  # [c_mid, channels, 3, 3]
    conv1_b: Tensor
    conv2_w: Tensor  # [c_mid, c_mid, 3, 3]
    conv2_b: Tensor
    mlp1_w: Tensor   # [c_mid, c_mid]
    mlp1_b: Tensor
    mlp2_w: Tensor   # [c_feat, c_mid]
    mlp2_b: Tensor
    role: str = "student"

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params: dict[str, Tensor], role: str | None = None) -> "MotionExtractor":
        return replace(self, role=role or self.role, **params)

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def c_feat(self) -> int:
        return self.mlp2_w.shape[0]


@dataclass(frozen=True)
class EmaLink:
    mu: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")


def init_motion_extractor(channels: int = 4, c_mid: int = 8, c_feat: int = 4,
                          seed: int = 0, role: str = "student") -> MotionExtractor:
    rng = Rng(seed, stream=7)

    def w(*shape):
        return (rng.uniform(int(np.prod(shape))).reshape(shape) - 0.5) * 0.2

    return MotionExtractor(
        conv1_w=w(c_mid, channels, 3, 3), conv1_b=np.zeros(c_mid),
        conv2_w=w(c_mid, c_mid, 3, 3), conv2_b=np.zeros(c_mid),
        mlp1_w=w(c_mid, c_mid), mlp1_b=np.zeros(c_mid),
        mlp2_w=w(c_feat, c_mid), mlp2_b=np.zeros(c_feat),
        role=role)


# -- conv/MLP primitives (hand-written forward + backward) -------------------

def _im2col(x: Tensor) -> Tensor:
    # [B, C, H, W] -> [B*H*W, 9*C] with tap-major column order
    bsz, cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((bsz, h, w, 9, cin))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di * 3 + dj, :] = xp[:, :, di:di + h, dj:dj + w].transpose(0, 2, 3, 1)
    return cols.reshape(bsz * h * w, 9 * cin)


def _conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution; x [B, Cin, H, W], k [Cout, Cin, 3, 3]."""
    bsz, cin, h, w = x.shape
    cout = k.shape[0]
    kf = k.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
    out = _im2col(x) @ kf + b
    return out.reshape(bsz, h, w, cout).transpose(0, 3, 1, 2)

def _conv2d_backward(x: Tensor, k: Tensor, dout: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    bsz, cin, h, w = x.shape
    cout = k.shape[0]
    kf = k.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
    dflat = dout.transpose(0, 2, 3, 1).reshape(bsz * h * w, cout)
    cols = _im2col(x)
    dkf = cols.T @ dflat
    dk = dkf.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = dflat.sum(axis=0)
    dcols = (dflat @ kf.T).reshape(bsz, h, w, 9, cin).transpose(3, 0, 4, 1, 2)
    dxp = np.zeros((bsz, cin, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + h, dj:dj + w] += dcols[di * 3 + dj]
    return dxp[:, :, 1:1 + h, 1:1 + w], dk, db


def _channel_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # per-pixel affine over channels: x [B, Cin, H, W], w [Cout, Cin]
    bsz, cin, h, wd = x.shape
    out = np.matmul(w, x.reshape(bsz, cin, h * wd)) + b[None, :, None]
    return out.reshape(bsz, w.shape[0], h, wd)


def _channel_affine_backward(x: Tensor, w: Tensor, dout: Tensor
                             ) -> tuple[Tensor, Tensor, Tensor]:
    bsz, cin, h, wd = x.shape
    dflat = dout.reshape(bsz, w.shape[0], h * wd)
    xflat = x.reshape(bsz, cin, h * wd)
    dw = np.tensordot(dflat, xflat, axes=([0, 2], [0, 2]))
    db = dout.sum(axis=(0, 2, 3))
    dx = np.matmul(w.T, dflat).reshape(x.shape)
    return dx, dw, db


def _forward_diffs(f: MotionExtractor, d: Tensor) -> tuple[Tensor, tuple]:
    """Extractor stack on difference frames d [B, C, H, W]; returns features + cache."""
    z1 = _conv2d(d, f.conv1_w, f.conv1_b)
    a1 = np.tanh(z1)
    z2 = _conv2d(a1, f.conv2_w, f.conv2_b)
    m1 = _channel_affine(z2, f.mlp1_w, f.mlp1_b)
    a2 = np.tanh(m1)
    out = _channel_affine(a2, f.mlp2_w, f.mlp2_b)
    return out, (d, a1, z2, a2)


def _backward_diffs(f: MotionExtractor, cache: tuple, dout: Tensor) -> tuple[Tensor, dict]:
    d, a1, z2, a2 = cache
    grads: dict[str, Tensor] = {}
    da2, grads["mlp2_w"], grads["mlp2_b"] = _channel_affine_backward(a2, f.mlp2_w, dout)
    dm1 = da2 * (1.0 - a2 * a2)
    dz2, grads["mlp1_w"], grads["mlp1_b"] = _channel_affine_backward(z2, f.mlp1_w, dm1)
    da1, grads["conv2_w"], grads["conv2_b"] = _conv2d_backward(a1, f.conv2_w, dz2)
    dz1 = da1 * (1.0 - a1 * a1)
    dd, grads["conv1_w"], grads["conv1_b"] = _conv2d_backward(d, f.conv1_w, dz1)
    return dd, grads


# -- public operations --------------------------------------------------------

def extract_flow(f: MotionExtractor, x: Tensor) -> Tensor:
    """Motion features [F-1, c_feat, H, W] from video latents [F, C, H, W]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] < 2:
        raise ValueError("motion requires >=2 frames")
    out, _ = _forward_diffs(f, x[1:] - x[:-1])
    return out


def extract_flow_vjp(f: MotionExtractor, x: Tensor, upstream: Tensor) -> tuple[Tensor, dict]:
    """Backprop `upstream` (d loss / d features) to the input video and params."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] < 2:
        raise ValueError("motion requires >=2 frames")
    out, cache = _forward_diffs(f, x[1:] - x[:-1])
    if upstream.shape != out.shape:
        raise ValueError("upstream shape does not match features")
    dd, grads = _backward_diffs(f, cache, upstream)
    dx = np.zeros_like(x)
    dx[1:] += dd
    dx[:-1] -= dd
    return dx, grads


def flow_regression_loss(student: MotionExtractor, teacher: MotionExtractor,
                         x_student: Tensor, x_teacher: Tensor
                         ) -> tuple[float, dict[str, Tensor], Tensor]:
    """MSE between teacher and student motion features.

    Returns (loss, student param grads, grad wrt x_student); the teacher path
    carries no gradient.
    """
    if np.shape(x_student) != np.shape(x_teacher):
        raise ValueError("student/teacher input shapes differ")
    f_t = extract_flow(teacher, x_teacher)
    f_s, cache = _forward_diffs(student, np.asarray(x_student)[1:] - np.asarray(x_student)[:-1])
    if np.shape(x_student)[0] < 2:
        raise ValueError("motion requires >=2 frames")
    resid = f_s - f_t
    loss = float(np.mean(resid * resid))
    dout = 2.0 * resid / resid.size
    dd, grads = _backward_diffs(student, cache, dout)
    dx = np.zeros_like(np.asarray(x_student, dtype=np.float64))
    dx[1:] += dd
    dx[:-1] -= dd
    return loss, grads, dx


def ema_update(link: EmaLink, teacher: MotionExtractor,
               student: MotionExtractor) -> MotionExtractor:
    """theta_teacher <- mu * theta_teacher + (1 - mu) * theta_student, per parameter."""
    new_params = {}
    for name in PARAM_NAMES:
        pt, ps = getattr(teacher, name), getattr(student, name)
        if pt.shape != ps.shape:
            raise ValueError(f"architecture mismatch on {name}")
        new_params[name] = link.mu * pt + (1.0 - link.mu) * ps
    return teacher.with_params(new_params)


def flow_score(extractor: MotionExtractor | None, schedule: NoiseSchedule,
               x_t: Tensor, mu_flow: Tensor, t: float) -> Tensor:
    """Feature-space score: -(F(x_t) - alpha(t) * mu_flow) / sigma(t)^2.

    extractor=None uses the identity feature map (the 1-D analytic worlds).
    """
    f = np.asarray(x_t, dtype=np.float64) if extractor is None else extract_flow(extractor, x_t)
    return score_from_denoised(schedule, f, np.asarray(mu_flow, dtype=np.float64), t)


def flow_dmd_gradient(generator, extractor: MotionExtractor | None,
                      real_flow_score: Callable[[Tensor, float], Tensor],
                      fake_flow_score: Callable[[Tensor, float], Tensor],
                      schedule: NoiseSchedule, rng: Rng, t: float,
                      n_samples: int = 32) -> dict[str, Tensor]:
    """Monte Carlo flow DMD gradient wrt generator parameters.

    Per draw: z -> G(z) -> forward-diffuse at t -> features -> score difference,
    chained back through the extractor and the generator. The returned dict is
    the gradient of the KL objective (descend it to match the real flow
    distribution). Deterministic per rng stream (common random numbers).
    """
    grads = {name: np.zeros_like(p) for name, p in generator.params().items()}
    for _ in range(n_samples):
        z = generator.sample_noise(rng)
        g = generator.forward(z)
        x_t = forward_diffuse(schedule, g, t, rng)
        if extractor is None:
            f = x_t
            sdiff = real_flow_score(f, t) - fake_flow_score(f, t)
            upstream_x = sdiff
        else:
            f = extract_flow(extractor, x_t)
            sdiff = real_flow_score(f, t) - fake_flow_score(f, t)
            upstream_x, _ = extract_flow_vjp(extractor, x_t, sdiff)
        sample_grads = generator.param_vjp(z, -alpha(schedule, t) * upstream_x)
        for name in grads:
            grads[name] += sample_grads[name]
    for name in grads:
        grads[name] /= n_samples
    return grads


def gaussian_motion_divergence(mean_a: Tensor, var_a: Tensor,
                               mean_b: Tensor, var_b: Tensor) -> float:
    """Closed-form KL(N(mean_a, var_a) || N(mean_b, var_b)) for diagonal
    Gaussians; diagnostic only (training optimizes the gradient surrogate)."""
    va = np.maximum(np.asarray(var_a, dtype=np.float64), 1e-12)
    vb = np.maximum(np.asarray(var_b, dtype=np.float64), 1e-12)
    da = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    return float(0.5 * np.sum(np.log(vb / va) + (va + da * da) / vb - 1.0))


# -- alternate (forward-only) flow representations ---------------------------

def _dct_matrix(n: int) -> Tensor:
    i = np.arange(n)[None, :]
    k = np.arange(n)[:, None]
    m = np.cos(np.pi * (i + 0.5) * k / n) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def _dct_band(x: Tensor, low: bool) -> Tensor:
    frames, channels, h, w = x.shape
    dh, dw = _dct_matrix(h), _dct_matrix(w)
    coeff = np.einsum("ij,bcjk,lk->bcil", dh, x, dw)
    mask = np.zeros((h, w))
    mask[: h // 2, : w // 2] = 1.0
    if not low:
        mask = 1.0 - mask
    return coeff * mask


def feature_map(name: str, extractor: MotionExtractor | None = None
                ) -> Callable[[Tensor], Tensor]:
    """Flow representation registry; only "learned" supports gradients."""
    if name == "learned":
        if extractor is None:
            raise ValueError("learned flow representation needs an extractor")
        return lambda x: extract_flow(extractor, x)
    if name == "diff":
        return lambda x: np.asarray(x)[1:] - np.asarray(x)[:-1]
    if name == "corr":
        def corr(x: Tensor) -> Tensor:
            x = np.asarray(x, dtype=np.float64)
            if x.shape[0] < 2:
                raise ValueError("motion requires >=2 frames")
            a, b = x[:-1], x[1:]
            bp = np.pad(b, ((0, 0), (0, 0), (1, 1), (1, 1)))
            h, w = x.shape[2], x.shape[3]
            vols = [np.einsum("bchw,bchw->bhw", a, bp[:, :, di:di + h, dj:dj + w])
                    for di in range(3) for dj in range(3)]
            return np.stack(vols, axis=1)
        return corr
    if name == "dct_low":
        return lambda x: _dct_band(np.asarray(x, dtype=np.float64), low=True)
    if name == "dct_high":
        return lambda x: _dct_band(np.asarray(x, dtype=np.float64), low=False)
    raise ValueError(f"unknown flow representation {name!r}")
