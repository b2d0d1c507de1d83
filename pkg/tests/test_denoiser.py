import numpy as np
import pytest

from diagdenoise.denoiser import (CountingDenoiser, LatentChunk, OracleDenoiser,
                                  ToyCausalDiT, predict_velocity, step,
                                  to_data_prediction)
from diagdenoise.kv_cache import KVCache, cache_noisy_result, gather_context
from diagdenoise.numerics import Rng, gaussian_sample
from diagdenoise.schedule import NoiseSchedule, alpha, sigma

SCHED = NoiseSchedule()


def _x(seed=1):
    return gaussian_sample(Rng(seed), (3, 4, 8, 8))


def test_zero_weights_zero_velocity():
    model = ToyCausalDiT(zero_weights=True)
    assert np.abs(model.predict(_x(), 500)).max() == 0.0


def test_predict_deterministic():
    a = ToyCausalDiT(model_seed=7).predict(_x(), 400)
    b = ToyCausalDiT(model_seed=7).predict(_x(), 400)
    assert np.array_equal(a, b)


def test_predict_seed_sensitivity():
    a = ToyCausalDiT(model_seed=7).predict(_x(), 400)
    b = ToyCausalDiT(model_seed=8).predict(_x(), 400)
    assert not np.array_equal(a, b)


def test_condition_changes_output():
    model = ToyCausalDiT()
    base = model.predict(_x(), 400, None, np.zeros(8))
    other = model.predict(_x(), 400, None, np.ones(8))
    assert np.abs(other - base).max() > 0.0


def test_timestep_changes_output():
    model = ToyCausalDiT()
    assert np.abs(model.predict(_x(), 100) - model.predict(_x(), 900)).max() > 0.0


def test_shape_preserved_and_finite():
    model = ToyCausalDiT()
    out = model.predict(_x(), 500)
    assert out.shape == (3, 4, 8, 8)
    assert np.all(np.isfinite(out))


def test_bad_chunk_shape_rejected():
    model = ToyCausalDiT()
    with pytest.raises(ValueError, match="shape"):
        model.predict(np.zeros((3, 4, 8, 7)), 500)


def test_bad_condition_length_rejected():
    model = ToyCausalDiT()
    with pytest.raises(ValueError, match="length"):
        model.predict(_x(), 500, None, np.zeros(5))


def test_context_mismatch_rejected():
    model = ToyCausalDiT(layers=2, heads=2)
    other = ToyCausalDiT(layers=1, heads=2)
    rng = Rng(2)
    cache = cache_noisy_result(KVCache(), _x(2), 100, SCHED, other, rng)
    with pytest.raises(ValueError, match="context"):
        model.predict(_x(), 500, gather_context(cache))


def test_context_changes_output():
    model = ToyCausalDiT()
    rng = Rng(3)
    cache = cache_noisy_result(KVCache(), _x(5), 100, SCHED, model, rng)
    with_ctx = model.predict(_x(), 500, gather_context(cache))
    without = model.predict(_x(), 500, None)
    assert np.abs(with_ctx - without).max() > 0.0


def test_project_kv_shapes_and_determinism():
    model = ToyCausalDiT()
    k1, v1 = model.project_kv(_x())
    k2, v2 = model.project_kv(_x())
    assert k1.shape == (2, model.tokens_per_chunk, 2, 8)
    assert np.array_equal(k1, k2) and np.array_equal(v1, v2)


def test_predict_velocity_typed_wrapper():
    model = ToyCausalDiT()
    chunk = LatentChunk(_x())
    out = predict_velocity(model, chunk, 300)
    assert isinstance(out, LatentChunk)
    assert out.data.shape == chunk.data.shape


def test_latent_chunk_validation():
    with pytest.raises(ValueError):
        LatentChunk(np.zeros((3, 4, 8)))
    c = LatentChunk(np.zeros((3, 4, 8, 8)))
    assert (c.frames, c.channels, c.height, c.width) == (3, 4, 8, 8)


def test_data_prediction_trivials():
    x_t = _x(4)
    v = _x(5)
    assert np.array_equal(to_data_prediction(SCHED, x_t, v, 0), x_t)
    assert np.array_equal(to_data_prediction(SCHED, x_t, np.zeros_like(x_t), 300), x_t)


def test_data_prediction_inverts_linear_path_exactly():
    # x = clean, x_t = alpha x + sigma eps, v = eps - x  =>  x0 == x
    rng = Rng(6)
    x = gaussian_sample(rng, (3, 4, 8, 8))
    eps = gaussian_sample(rng, (3, 4, 8, 8))
    for t in (100, 500, 900):
        a, s = alpha(SCHED, t), sigma(SCHED, t)
        x_t = a * x + s * eps
        x0 = to_data_prediction(SCHED, x_t, eps - x, t)
        assert np.abs(x0 - x).max() < 1e-12


def test_step_requires_decreasing_timesteps():
    model = ToyCausalDiT(zero_weights=True)
    with pytest.raises(ValueError, match="decrease"):
        step(SCHED, model, _x(), 100, 100, rng=Rng(1))


def test_step_final_returns_data_prediction():
    model = ToyCausalDiT()
    x_t = _x(7)
    v = model.predict(x_t, 1000, None, None)
    out = step(SCHED, model, x_t, 1000, 0, rng=Rng(8))
    assert np.array_equal(out, to_data_prediction(SCHED, x_t, v, 1000))


def test_step_deterministic_per_seed():
    model = ToyCausalDiT()
    a = step(SCHED, model, _x(9), 1000, 100, rng=Rng(10))
    b = step(SCHED, model, _x(9), 1000, 100, rng=Rng(10))
    assert np.array_equal(a, b)


def test_oracle_denoiser_recovers_sample_from_any_timestep():
    rng = Rng(11)
    clean = gaussian_sample(rng, (3, 4, 8, 8))
    oracle = OracleDenoiser(SCHED, clean)
    for t_cur in (1000, 700, 400, 100):
        a, s = alpha(SCHED, t_cur), sigma(SCHED, t_cur)
        x_t = a * clean + s * gaussian_sample(rng, clean.shape)
        out = step(SCHED, oracle, x_t, t_cur, 0, rng=rng)
        assert np.abs(out - clean).max() < 1e-9


def test_step_chain_shape_preserved():
    model = ToyCausalDiT()
    rng = Rng(12)
    x = gaussian_sample(rng, (3, 4, 8, 8))
    for t_cur, t_next in ((1000, 700), (700, 400), (400, 100), (100, 0)):
        x = step(SCHED, model, x, t_cur, t_next, rng=rng)
        assert x.shape == (3, 4, 8, 8)
        assert np.all(np.isfinite(x))


def test_deterministic_renoise_consumes_no_rng():
    model = ToyCausalDiT()
    x = _x(13)
    a = step(SCHED, model, x, 1000, 100, rng=None, deterministic_renoise=True)
    b = step(SCHED, model, x, 1000, 100, rng=None, deterministic_renoise=True)
    assert np.array_equal(a, b)


def test_counting_denoiser_counts_predicts_only():
    model = CountingDenoiser(ToyCausalDiT())
    model.project_kv(_x())
    assert model.predict_calls == 0
    model.predict(_x(), 500)
    assert model.predict_calls == 1
    assert model.frames_per_chunk == 3  # attribute delegation
