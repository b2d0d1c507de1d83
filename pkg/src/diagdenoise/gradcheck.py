"""Registry of analytic-gradient certifications against central differences.

Every hand-derived gradient in the project is checked here in a small world
(tiny extractor, short clips) where full coordinate-wise finite differencing
is affordable. DMD estimators are checked through their scalar potentials:
with Gaussian (or diagonal-affine) scores the score difference is a gradient
field, so the Monte Carlo estimator with common random numbers must equal the
finite-difference gradient of the replayed potential exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .motion_flow import (PARAM_NAMES, extract_flow, extract_flow_vjp,
                          flow_dmd_gradient, flow_regression_loss,
                          init_motion_extractor)
from .numerics import Rng, finite_diff_grad, gaussian_sample, relative_error
from .schedule import NoiseSchedule, alpha, sigma
from .trainer import AffineHead, ClipGenerator, GaussianGenerator


@dataclass(frozen=True)
class GradCheckRow:
    check: str
    seed: int
    rel_err: float


_SCHED = NoiseSchedule()
_T = 100
_H = 1e-5


def _tiny_extractor(seed: int, role: str = "student"):
    return init_motion_extractor(channels=2, c_mid=3, c_feat=2, seed=seed, role=role)


def _tiny_clip_generator(seed: int) -> ClipGenerator:
    return ClipGenerator(frames=3, channels=2, height=4, width=4,
                         rng=Rng(seed, stream=31), noise_gain_init=0.1)


def check_extractor_probe(seed: int) -> float:
    """<W, F(x)> gradients wrt extractor parameters and the input video."""
    ext = _tiny_extractor(seed)
    rng = Rng(seed, stream=32)
    x = gaussian_sample(rng, (3, 2, 4, 4))
    probe = gaussian_sample(rng, (2, 2, 4, 4))
    dx, grads = extract_flow_vjp(ext, x, probe)
    worst = relative_error(dx, finite_diff_grad(
        lambda v: float((extract_flow(ext, v) * probe).sum()), x, _H))
    for name in PARAM_NAMES:
        def f(p, name=name):
            e = ext.with_params({**ext.params(), name: p})
            return float((extract_flow(e, x) * probe).sum())
        worst = max(worst, relative_error(
            grads[name], finite_diff_grad(f, getattr(ext, name), _H)))
    return worst


def check_flow_regression(seed: int) -> float:
    """Flow regression loss gradients wrt student parameters and input."""
    student = _tiny_extractor(seed)
    teacher = _tiny_extractor(seed + 1, role="teacher")
    rng = Rng(seed, stream=33)
    x_s = gaussian_sample(rng, (3, 2, 4, 4))
    x_t = gaussian_sample(rng, (3, 2, 4, 4))
    _, grads, dx = flow_regression_loss(student, teacher, x_s, x_t)
    worst = relative_error(dx, finite_diff_grad(
        lambda v: flow_regression_loss(student, teacher, v, x_t)[0], x_s, _H))
    for name in PARAM_NAMES:
        def f(p, name=name):
            s = student.with_params({**student.params(), name: p})
            return flow_regression_loss(s, teacher, x_s, x_t)[0]
        worst = max(worst, relative_error(
            grads[name], finite_diff_grad(f, getattr(student, name), _H)))
    return worst


def check_regression_loss(seed: int) -> float:
    """Paired squared-error regression gradients for the clip generator."""
    gen = _tiny_clip_generator(seed)
    rng = Rng(seed, stream=34)
    zs = gen.sample_noise_batch(rng, 4)
    ys = gaussian_sample(rng, (4, 3, 2, 4, 4))

    def loss_with(params: dict) -> float:
        g2 = _tiny_clip_generator(seed)
        g2.b, g2.a, g2.c = params["b"], params["a"], params["c"]
        r = g2.forward_batch(zs) - ys
        return float(np.mean(r * r))

    r = gen.forward_batch(zs) - ys
    grads = gen.param_vjp_batch(zs, 2.0 * r / r.size)
    worst = 0.0
    for name, value in gen.params().items():
        def f(p, name=name):
            params = {k: v.copy() for k, v in gen.params().items()}
            params[name] = p
            return loss_with(params)
        worst = max(worst, relative_error(grads[name], finite_diff_grad(f, value, _H)))
    return worst


def check_dmd_chain(seed: int) -> float:
    """Spatial DMD estimator vs the finite-difference gradient of its potential.

    Real score is a diffused Gaussian, fake score comes from an affine head;
    both are gradient fields, so with frozen draws the estimator must equal
    the exact gradient of L(b) = -mean[log p_real(x_t) - Phi_fake(x_t)]."""
    rng = Rng(seed, stream=35)
    m, s = 0.7, 1.0
    head = AffineHead((1,))
    head.u += 0.3 + 0.1 * float(rng.uniform(1)[0])
    head.w += 0.2 * float(rng.uniform(1)[0])
    n = 16
    zs = gaussian_sample(rng, (n, 1))
    eps = gaussian_sample(rng, (n, 1))
    a_t, s_t = alpha(_SCHED, _T), sigma(_SCHED, _T)
    v_real = a_t * a_t * s * s + s_t * s_t

    def potential_loss(b: np.ndarray) -> float:
        g = zs + b
        x = a_t * g + s_t * eps
        log_real = -((x - a_t * m) ** 2) / (2.0 * v_real)
        phi_fake = -((1.0 - a_t * head.u) * x * x / 2.0 - a_t * head.w * x) / (s_t * s_t)
        return -float(np.mean(log_real - phi_fake))

    gen = GaussianGenerator(0.4)
    g = gen.forward_batch(zs)
    x = a_t * g + s_t * eps
    s_real = -(x - a_t * m) / v_real
    s_fake = -(x - a_t * head.mu(x)) / (s_t * s_t)
    sdiff = s_real - s_fake
    grads = gen.param_vjp_batch(zs, -a_t * sdiff / sdiff.size)
    num = finite_diff_grad(potential_loss, np.array([0.4]), _H)
    return relative_error(grads["b"], num)


def check_flow_dmd_chain(seed: int) -> float:
    """Flow DMD estimator chain (generator -> diffusion -> extractor -> score
    difference) vs the finite-difference gradient of the feature-space
    potential, with common random numbers."""
    teacher = _tiny_extractor(seed + 2, role="teacher")
    rng_probe = Rng(seed, stream=36)
    feat_shape = (2, 2, 4, 4)
    mean_r = gaussian_sample(rng_probe, feat_shape) * 0.1
    var_r = 1.0 + 0.5 * rng_probe.uniform(int(np.prod(feat_shape))).reshape(feat_shape)
    mean_f = gaussian_sample(rng_probe, feat_shape) * 0.1
    var_f = 1.0 + 0.5 * rng_probe.uniform(int(np.prod(feat_shape))).reshape(feat_shape)

    real_score = lambda f, t: -(f - mean_r) / var_r
    fake_score = lambda f, t: -(f - mean_f) / var_f
    n_samples = 4
    gen = _tiny_clip_generator(seed)
    grads = flow_dmd_gradient(gen, teacher, real_score, fake_score, _SCHED,
                              Rng(seed, stream=37), _T, n_samples=n_samples)

    a_t, s_t = alpha(_SCHED, _T), sigma(_SCHED, _T)

    def potential_loss(params: dict) -> float:
        g2 = _tiny_clip_generator(seed)
        g2.b, g2.a, g2.c = params["b"], params["a"], params["c"]
        rng = Rng(seed, stream=37)  # replay the estimator's draws exactly
        total = 0.0
        for _ in range(n_samples):
            z = g2.sample_noise(rng)
            g = g2.forward(z)
            eps = gaussian_sample(rng, g.shape)
            x_t = (1.0 - s_t) * g + s_t * eps
            f = extract_flow(teacher, x_t)
            phi_real = -((f - mean_r) ** 2) / (2.0 * var_r)
            phi_fake = -((f - mean_f) ** 2) / (2.0 * var_f)
            total += float((phi_real - phi_fake).sum())
        return -total / n_samples

    worst = 0.0
    for name, value in gen.params().items():
        def f(p, name=name):
            params = {k: v.copy() for k, v in gen.params().items()}
            params[name] = p
            return potential_loss(params)
        worst = max(worst, relative_error(grads[name], finite_diff_grad(f, value, _H)))
    return worst


def check_head_fit(seed: int) -> float:
    """Affine denoiser head fitting gradients (the n_inner refit step)."""
    rng = Rng(seed, stream=38)
    head = AffineHead((5,))
    head.u += gaussian_sample(rng, (5,)) * 0.1
    head.w += gaussian_sample(rng, (5,)) * 0.1
    clean = gaussian_sample(rng, (8, 5))
    noised = gaussian_sample(rng, (8, 5))
    du, dw = head.fit_grads(clean, noised)

    def loss_u(u):
        r = u * noised + head.w - clean
        return float(np.mean(r * r, axis=0).sum())

    def loss_w(w):
        r = head.u * noised + w - clean
        return float(np.mean(r * r, axis=0).sum())

    return max(relative_error(du, finite_diff_grad(loss_u, head.u, _H)),
               relative_error(dw, finite_diff_grad(loss_w, head.w, _H)))


CHECKS: list[tuple[str, Callable[[int], float]]] = [
    ("extractor_probe", check_extractor_probe),
    ("flow_regression", check_flow_regression),
    ("regression_loss", check_regression_loss),
    ("dmd_chain", check_dmd_chain),
    ("flow_dmd_chain", check_flow_dmd_chain),
    ("head_fit", check_head_fit),
]


def run_gradcheck(seeds: int = 20) -> list[GradCheckRow]:
    rows = []
    for name, fn in CHECKS:
        for seed in range(seeds):
            rows.append(GradCheckRow(check=name, seed=seed, rel_err=fn(seed)))
    return rows


def max_rel_err(rows: list[GradCheckRow]) -> float:
    return max(r.rel_err for r in rows)
