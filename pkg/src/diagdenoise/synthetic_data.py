"""Self-contained toy data: moving-dot clips and a fixed full-rank linear codec.

The dot is splatted bilinearly at a continuous position, which preserves both
total pixel mass and the first moment, so the intensity centroid tracks the
true dot position exactly while it stays inside the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, gaussian_sample


@dataclass(frozen=True)
class MovingDotDataset:
    height: int = 8
    width: int = 8
    intensity: float = 8.0
    velocity: tuple[float, float] = (1.0, 0.0)  # (dx, dy): column / row advance
    frames: int = 12
    seed: int = 0


def _reflect(p: float, limit: float) -> float:
    # fold a continuous coordinate into [0, limit] with mirror boundaries
    if limit <= 0:
        return 0.0
    period = 2.0 * limit
    q = p % period
    return period - q if q > limit else q


def _splat(img: np.ndarray, y: float, x: float, intensity: float) -> None:
    h, w = img.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    for dy_, wy in ((0, 1.0 - fy), (1, fy)):
        for dx_, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy_, x0 + dx_
            if 0 <= yy < h and 0 <= xx < w and wy * wx > 0.0:
                img[yy, xx] += intensity * wy * wx


def make_clip(ds: MovingDotDataset, clip_index: int) -> Tensor:
    """Pixel video [F, 1, H, W], deterministic per (dataset seed, clip index)."""
    rng = Rng(ds.seed, stream=clip_index)
    # start away from the walls so short clips see no reflection
    u = rng.uniform(2)
    y = 1.0 + u[0] * (ds.height - 3)
    x = 1.0 + u[1] * (ds.width - 3)
    dx, dy = ds.velocity
    clip = np.zeros((ds.frames, 1, ds.height, ds.width), dtype=np.float64)
    for f in range(ds.frames):
        py = _reflect(y + dy * f, ds.height - 1)
        px = _reflect(x + dx * f, ds.width - 1)
        _splat(clip[f, 0], py, px, ds.intensity)
    return clip


def motion_amplitude(video: Tensor) -> float:
    """Mean per-step displacement of the intensity centroid.

    Centroid weights are the positive deviation from the per-frame mean,
    max(pixel - mean, 0): invariant to any constant background added to a
    frame, and the centroid of a single translated dot tracks its position
    exactly. Frames with zero residual mass contribute zero displacement.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[0] < 2:
        raise ValueError("motion requires >=2 frames in [F, C, H, W] layout")
    frames, _, h, w = video.shape
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    centroids = []
    for f in range(frames):
        img = video[f].sum(axis=0)
        wgt = np.maximum(img - img.mean(), 0.0)
        mass = wgt.sum()
        if mass <= 0.0:
            centroids.append(None)
            continue
        centroids.append(((wgt * ys).sum() / mass, (wgt * xs).sum() / mass))
    steps = []
    for a, b in zip(centroids, centroids[1:]):
        if a is None or b is None:
            steps.append(0.0)
        else:
            steps.append(float(np.hypot(b[0] - a[0], b[1] - a[1])))
    return float(np.mean(steps))


class LinearCodec:
    """Fixed random full-rank linear stand-in for a VAE.

    encode maps a pixel frame (H*W values) to channels*H*W latents; decode is
    the pseudo-inverse, so decode(encode(x)) == x to machine precision.
    """

    def __init__(self, height: int = 8, width: int = 8, channels: int = 4, seed: int = 1234):
        self.height = height
        self.width = width
        self.channels = channels
        self.seed = seed
        pixels = height * width
        latents = channels * height * width
        rng = Rng(seed, stream=0)
        self.encode_matrix = gaussian_sample(rng, (latents, pixels)) / np.sqrt(pixels)
        self.decode_matrix = np.linalg.pinv(self.encode_matrix)

    def encode(self, video: Tensor) -> Tensor:
        """[F, 1, H, W] pixels -> [F, C, H, W] latents."""
        frames = video.shape[0]
        flat = video.reshape(frames, -1)
        lat = flat @ self.encode_matrix.T
        return lat.reshape(frames, self.channels, self.height, self.width)

    def decode(self, latents: Tensor) -> Tensor:
        """[F, C, H, W] latents -> [F, 1, H, W] pixels."""
        frames = latents.shape[0]
        flat = latents.reshape(frames, -1)
        pix = flat @ self.decode_matrix.T
        return pix.reshape(frames, 1, self.height, self.width)
