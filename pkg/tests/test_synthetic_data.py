import numpy as np
import pytest

from diagdenoise.synthetic_data import (LinearCodec, MovingDotDataset, make_clip,
                                        motion_amplitude)


def test_static_clip_identical_frames():
    ds = MovingDotDataset(velocity=(0.0, 0.0), frames=3, seed=1)
    clip = make_clip(ds, 0)
    assert np.array_equal(clip[0], clip[1])
    assert np.array_equal(clip[0], clip[2])


def test_column_advances_with_unit_velocity():
    ds = MovingDotDataset(velocity=(1.0, 0.0), frames=3, seed=2)
    clip = make_clip(ds, 0)
    cols = [np.average(np.arange(8), weights=clip[f, 0].sum(axis=0)) for f in range(3)]
    assert cols[1] - cols[0] == pytest.approx(1.0, abs=1e-9)
    assert cols[2] - cols[1] == pytest.approx(1.0, abs=1e-9)


def test_clip_deterministic_per_index():
    ds = MovingDotDataset(seed=5)
    assert np.array_equal(make_clip(ds, 3), make_clip(ds, 3))
    assert not np.array_equal(make_clip(ds, 3), make_clip(ds, 4))


def test_pixel_mass_constant_per_frame():
    ds = MovingDotDataset(velocity=(0.7, -0.3), frames=6, seed=9)
    clip = make_clip(ds, 1)
    masses = clip.sum(axis=(1, 2, 3))
    assert np.allclose(masses, ds.intensity, atol=1e-9)


def test_motion_amplitude_static_zero():
    ds = MovingDotDataset(velocity=(0.0, 0.0), frames=4, seed=3)
    assert motion_amplitude(make_clip(ds, 0)) == 0.0


def test_motion_amplitude_unit_velocity():
    ds = MovingDotDataset(velocity=(1.0, 0.0), frames=3, seed=4)
    assert motion_amplitude(make_clip(ds, 0)) == pytest.approx(1.0, abs=1e-9)


def test_motion_amplitude_diagonal_velocity():
    ds = MovingDotDataset(velocity=(1.0, 1.0), frames=3, seed=4)
    assert motion_amplitude(make_clip(ds, 0)) == pytest.approx(np.sqrt(2.0), abs=1e-9)


def test_motion_amplitude_background_invariant():
    ds = MovingDotDataset(velocity=(1.0, 0.0), frames=4, seed=6)
    clip = make_clip(ds, 2)
    assert motion_amplitude(clip + 3.25) == pytest.approx(motion_amplitude(clip), abs=1e-12)


def test_motion_amplitude_needs_two_frames():
    with pytest.raises(ValueError, match="2 frames"):
        motion_amplitude(np.zeros((1, 1, 8, 8)))


def test_codec_round_trip_exact():
    codec = LinearCodec()
    ds = MovingDotDataset(velocity=(0.5, 0.25), frames=5, seed=7)
    clip = make_clip(ds, 0)
    rt = codec.decode(codec.encode(clip))
    assert np.abs(rt - clip).max() < 1e-10


def test_codec_shapes():
    codec = LinearCodec(height=8, width=8, channels=4)
    clip = np.zeros((3, 1, 8, 8))
    lat = codec.encode(clip)
    assert lat.shape == (3, 4, 8, 8)
    assert codec.decode(lat).shape == (3, 1, 8, 8)


def test_reflective_boundary_keeps_dot_inside():
    ds = MovingDotDataset(velocity=(3.0, 2.0), frames=20, seed=8)
    clip = make_clip(ds, 0)
    assert np.all(clip >= 0.0)
    assert np.allclose(clip.sum(axis=(1, 2, 3)), ds.intensity)
