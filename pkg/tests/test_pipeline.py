import numpy as np
import pytest

from diagdenoise.denoiser import CountingDenoiser, ToyCausalDiT
from diagdenoise.numerics import Rng, gaussian_sample
from diagdenoise.pipeline import (PipelineConfig, generate, mix,
                                  reference_generate)
from diagdenoise.schedule import NoiseSchedule, alpha, sigma
from diagdenoise.step_planner import StepSchedule, parse_schedule, timesteps_for

SCHED = NoiseSchedule()


def _model(**kw):
    return ToyCausalDiT(**kw)


def test_single_chunk_zero_weights_no_mix_equals_initial_noise():
    # zero network, one step from t=1000: x0 = x_T - sigma(1000)*0 = x_T
    cfg = PipelineConfig(step_schedule=StepSchedule([1]), forcing_t=100, seed=11,
                         mix_outputs=False)
    model = _model(zero_weights=True)
    result = generate(cfg, model, SCHED)
    expected = gaussian_sample(Rng(11, stream=0), (3, 4, 8, 8))
    assert np.array_equal(result.chunks[0], expected)


def test_chunk_logs_match_planner_timesteps():
    cfg = PipelineConfig(step_schedule=parse_schedule("4322222"), seed=5)
    result = generate(cfg, _model(), SCHED)
    for log, steps in zip(result.logs, (4, 3, 2, 2, 2, 2, 2)):
        assert log.steps == steps
        assert list(log.timesteps) == timesteps_for(steps)


@pytest.mark.parametrize("seed", range(10))
def test_oracle_equivalence_bitwise(seed):
    # forcing_t=0, mixing off, uniform steps, full window: the rolling cache
    # must match brute-force recomputation exactly
    cfg = PipelineConfig(step_schedule=StepSchedule([3] * 7), forcing_t=0,
                         window_chunks=10, seed=seed, mix_outputs=False,
                         strict_noisy_cache=False)
    model = _model()
    a = generate(cfg, model, SCHED)
    b = reference_generate(cfg, model, SCHED)
    assert all(np.array_equal(x, y) for x, y in zip(a.chunks, b.chunks))


def test_oracle_equivalence_two_step_uniform():
    cfg = PipelineConfig(step_schedule=StepSchedule([2] * 6), forcing_t=0,
                         window_chunks=12, seed=3, mix_outputs=False,
                         strict_noisy_cache=False)
    model = _model()
    a = generate(cfg, model, SCHED)
    b = reference_generate(cfg, model, SCHED)
    assert all(np.array_equal(x, y) for x, y in zip(a.chunks, b.chunks))


def test_reference_sees_all_history_with_large_window():
    cfg = PipelineConfig(step_schedule=StepSchedule([2] * 5), forcing_t=0,
                         window_chunks=50, seed=9, mix_outputs=False,
                         strict_noisy_cache=False)
    result = reference_generate(cfg, _model(), SCHED)
    # chunk 4 attends to all four predecessors plus the transient copy of chunk 3
    assert result.logs[-1].context_indices == (0, 1, 2, 3, 3)


def test_single_chunk_pipelines_trivially_equal():
    cfg = PipelineConfig(step_schedule=StepSchedule([3]), forcing_t=0, seed=21,
                        mix_outputs=False, strict_noisy_cache=False)
    model = _model()
    a = generate(cfg, model, SCHED)
    b = reference_generate(cfg, model, SCHED)
    assert np.array_equal(a.chunks[0], b.chunks[0])


def test_predict_call_ledger():
    # total predict calls == sum of steps; NFE / calls == nfe_multiplier
    cfg = PipelineConfig(step_schedule=parse_schedule("4322222"), seed=2)
    counting = CountingDenoiser(_model())
    generate(cfg, counting, SCHED)
    assert counting.predict_calls == 17
    from diagdenoise.step_planner import CostModel, nfe_count
    assert nfe_count(parse_schedule("4322222"), CostModel()) // counting.predict_calls == 2


def test_cache_never_contains_current_or_future_chunk():
    cfg = PipelineConfig(step_schedule=parse_schedule("4322222"), seed=4)
    result = generate(cfg, _model(), SCHED)
    for log in result.logs:
        assert all(i < log.chunk_index for i in log.context_indices)


def test_determinism_across_runs():
    cfg = PipelineConfig(step_schedule=parse_schedule("432"), seed=77)
    model = _model()
    a = generate(cfg, model, SCHED)
    b = generate(cfg, model, SCHED)
    assert all(np.array_equal(x, y) for x, y in zip(a.chunks, b.chunks))


def test_seed_changes_output():
    model = _model()
    a = generate(PipelineConfig(step_schedule=parse_schedule("432"), seed=1), model, SCHED)
    b = generate(PipelineConfig(step_schedule=parse_schedule("432"), seed=2), model, SCHED)
    assert not np.array_equal(a.chunks[0], b.chunks[0])


def test_forcing_t_changes_output():
    model = _model()
    a = generate(PipelineConfig(step_schedule=parse_schedule("432"), seed=1,
                                forcing_t=100), model, SCHED)
    b = generate(PipelineConfig(step_schedule=parse_schedule("432"), seed=1,
                                forcing_t=400), model, SCHED)
    assert not np.array_equal(a.chunks[-1], b.chunks[-1])


def test_schedule_shorter_than_chunks_is_config_error():
    cfg = PipelineConfig(step_schedule=parse_schedule("432"), chunks=5, seed=1)
    with pytest.raises(ValueError, match="cyclic extension is disabled"):
        generate(cfg, _model(), SCHED)


def test_cyclic_extension_reaches_requested_chunks():
    sched = StepSchedule([4, 3, 2, 2, 2, 2, 2], cyclic_extension=True)
    cfg = PipelineConfig(step_schedule=sched, chunks=9, seed=1)
    result = generate(cfg, _model(), SCHED)
    assert len(result.chunks) == 9
    assert result.logs[7].steps == 4  # pattern repeats


def test_mix_trivials_and_weights():
    x = gaussian_sample(Rng(31), (3, 4, 8, 8))
    assert np.array_equal(mix(x, 0, SCHED, Rng(1)), x)
    pure = mix(np.zeros((40, 4, 8, 8)), 1000, SCHED, Rng(2))
    assert abs(pure.std() - 1.0) < 0.02
    big = mix(np.ones((10, 10, 10, 10)), 100, SCHED, Rng(3))
    assert abs(big.mean() - alpha(SCHED, 100)) < 0.02
    assert abs(big.std() - sigma(SCHED, 100)) < 0.02


def test_mix_last_flag():
    model = _model()
    base = dict(step_schedule=parse_schedule("22"), seed=6, forcing_t=100)
    mixed = generate(PipelineConfig(**base, mix_last=True), model, SCHED)
    unmixed = generate(PipelineConfig(**base, mix_last=False), model, SCHED)
    assert np.array_equal(mixed.chunks[0], unmixed.chunks[0])
    assert not np.array_equal(mixed.chunks[-1], unmixed.chunks[-1])


def test_auto_phase_boundary_from_schedule():
    cfg = PipelineConfig(step_schedule=parse_schedule("5432222"), seed=1)
    result = generate(cfg, _model(), SCHED)
    phases = [log.phase for log in result.logs]
    assert phases == ["base", "base", "base", "extension", "extension",
                      "extension", "extension"]


def test_manual_phase_boundary():
    cfg = PipelineConfig(step_schedule=parse_schedule("5432222"), seed=1,
                         auto_phase=False, base_phase_chunks=4)
    result = generate(cfg, _model(), SCHED)
    phases = [log.phase for log in result.logs]
    assert phases == ["base", "base", "base", "base", "extension",
                      "extension", "extension"]


def test_uniform_schedule_stays_base_phase():
    cfg = PipelineConfig(step_schedule=StepSchedule([3] * 5), seed=1)
    result = generate(cfg, _model(), SCHED)
    assert all(log.phase == "base" for log in result.logs)


def test_strict_mode_rejects_zero_forcing_in_pipeline():
    cfg = PipelineConfig(step_schedule=parse_schedule("22"), seed=1, forcing_t=0,
                         strict_noisy_cache=True)
    with pytest.raises(ValueError, match="nonzero noise"):
        generate(cfg, _model(), SCHED)


def test_bounded_cache_over_fifty_chunks():
    sched = StepSchedule([2], cyclic_extension=True)
    cfg = PipelineConfig(step_schedule=sched, chunks=50, seed=13, window_chunks=4)
    result = generate(cfg, _model(), SCHED)
    mem = [log.cache_memory_bytes for log in result.logs]
    for log in result.logs:
        assert log.cache_len_after <= 4
        k = log.chunk_index + 1  # entries after chunk k-1 committed
        lo = max(0, k - 4)
        assert log.cache_indices_after == tuple(range(lo, k))
    assert len(set(mem[3:])) == 1  # constant once the window fills


def test_deterministic_renoise_pipeline_runs():
    cfg = PipelineConfig(step_schedule=parse_schedule("32"), seed=8,
                         deterministic_renoise=True)
    a = generate(cfg, _model(), SCHED)
    b = generate(cfg, _model(), SCHED)
    assert all(np.array_equal(x, y) for x, y in zip(a.chunks, b.chunks))
