"""Flow-matching noise schedule: timestep shift, forward diffusion, score formula.

Convention used throughout: t=0 is clean data, t=T is pure noise, and the
linear path coefficients are alpha(t) = 1 - sigma(t), sigma(t) = t'/T with t'
the shifted timestep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, gaussian_sample


@dataclass(frozen=True)
class NoiseSchedule:
    """Shifted linear noise schedule over integer timesteps [0, horizon_T]."""

    shift_k: float = 5.0
    horizon_T: int = 1000
    warp_enabled: bool = True

    def __post_init__(self):
        if self.shift_k < 1.0:
            raise ValueError("shift_k must be >= 1")
        if self.horizon_T <= 0:
            raise ValueError("horizon_T must be positive")

    def _check_t(self, t: float) -> float:
        t = float(t)
        if not 0.0 <= t <= self.horizon_T:
            raise ValueError(f"timestep {t} outside [0, {self.horizon_T}]")
        return t


@dataclass(frozen=True)
class Preconditioning:
    """Preconditioning constants, frozen to the base-model values (all 1)."""

    c_skip: float = 1.0
    c_in: float = 1.0
    c_out: float = 1.0

    def __post_init__(self):
        if not (self.c_skip == self.c_in == self.c_out == 1.0):
            raise ValueError("preconditioning constants are frozen to 1")

    def c_noise(self, s: NoiseSchedule, t: float) -> float:
        return shift_timestep(s, t)


def shift_timestep(s: NoiseSchedule, t: float) -> float:
    """Shifted timestep t' = (k*t/T) / (1 + (k-1)*t/T) * T; identity when warp is off."""
    t = s._check_t(t)
    if not s.warp_enabled:
        return t
    u = t / s.horizon_T
    return (s.shift_k * u) / (1.0 + (s.shift_k - 1.0) * u) * s.horizon_T


def sigma(s: NoiseSchedule, t: float) -> float:
    """Noise fraction sigma(t) = t'/T; 0 at t=0, 1 at t=T, strictly increasing."""
    return shift_timestep(s, t) / s.horizon_T


def alpha(s: NoiseSchedule, t: float) -> float:
    """Signal fraction of the linear path, alpha(t) = 1 - sigma(t)."""
    return 1.0 - sigma(s, t)


def forward_diffuse(s: NoiseSchedule, x: Tensor, t: float, rng: Rng) -> Tensor:
    """Draw x_t = alpha(t)*x + sigma(t)*eps with fresh eps; exact x at t=0."""
    sig = sigma(s, t)
    if sig == 0.0:
        # still well-defined without a draw, but drawing keeps stream usage
        # uniform across timesteps; the sample contributes exactly zero.
        eps = gaussian_sample(rng, x.shape)
        return x + 0.0 * eps
    eps = gaussian_sample(rng, x.shape)
    return (1.0 - sig) * x + sig * eps


def inject_noise(s: NoiseSchedule, x: Tensor, t: float, rng: Rng, vp_form: bool = False) -> Tensor:
    """Noise injection used by diagonal forcing and Mix.

    Default is the schedule-consistent linear form (alpha, sigma); vp_form
    switches to the variance-preserving pair (sqrt(alpha), sqrt(1-alpha)).
    """
    if not vp_form:
        return forward_diffuse(s, x, t, rng)
    a = alpha(s, t)
    eps = gaussian_sample(rng, x.shape)
    return np.sqrt(a) * x + np.sqrt(1.0 - a) * eps


def score_from_denoised(s: NoiseSchedule, x_t: Tensor, mu: Tensor, t: float) -> Tensor:
    """Score of the diffused distribution: -(x_t - alpha(t)*mu) / sigma(t)^2."""
    if np.shape(x_t) != np.shape(mu):
        raise ValueError("x_t and mu shapes differ")
    sig = sigma(s, t)
    if sig == 0.0:
        raise ValueError("score undefined at zero noise")
    return -(x_t - (1.0 - sig) * mu) / (sig * sig)
