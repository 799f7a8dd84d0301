import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nowcast.errors import ConfigError, DataError, DimensionError, FormatError, LengthError
from nowcast.grid import (Cell, GridFrame, Sequence, SynthConfig, WindowConfig, decode_sequence,
                          encode_sequence, inverse_transform, read_sequence, render_cells,
                          stack_samples, synthesize, synthesize_events, transform, window,
                          write_sequence)


def ncg_bytes(T, H, W, values, dt=1800, magic=b"NCG1", version=1):
    head = struct.pack("<4s5I", magic, version, T, H, W, dt)
    return head + np.asarray(values, dtype="<f4").tobytes()


# ---------------------------------------------------------------- NCG format

def test_zero_file_decodes_to_one_zero_frame(tmp_path):
    p = tmp_path / "z.ncg"
    p.write_bytes(ncg_bytes(1, 2, 2, [0, 0, 0, 0]))
    seq = read_sequence(p)
    assert len(seq) == 1 and seq.shape == (2, 2)
    assert np.all(seq.array() == 0)


def test_write_layout_header_plus_payload(tmp_path):
    p = tmp_path / "z.ncg"
    write_sequence(Sequence.from_array(np.zeros((1, 2, 2))), p)
    data = p.read_bytes()
    assert len(data) == 24 + 16
    assert data[:4] == b"NCG1"
    assert struct.unpack("<5I", data[4:24]) == (1, 1, 2, 2, 1800)
    assert data[24:] == bytes(16)


def test_time_major_row_major_payload():
    arr = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    buf = encode_sequence(Sequence.from_array(arr))
    assert np.array_equal(np.frombuffer(buf[24:], "<f4"), np.arange(12, dtype=np.float32))


def test_file_round_trip_is_bytewise(tmp_path):
    p, q = tmp_path / "a.ncg", tmp_path / "b.ncg"
    write_sequence(synthesize(SynthConfig(height=8, width=10, n_frames=5, noise_std=0.3)), p)
    write_sequence(read_sequence(p), q)
    assert p.read_bytes() == q.read_bytes()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(0, 1e6, width=32)),
       st.integers(1, 10_000))
def test_round_trip_preserves_bits(arr, dt):
    seq = Sequence.from_array(arr, dt_seconds=dt)
    back = decode_sequence(encode_sequence(seq))
    assert back == seq
    assert back.array().tobytes() == arr.tobytes()


def test_truncated_payload_is_length_error():
    with pytest.raises(LengthError):
        decode_sequence(ncg_bytes(5, 2, 2, np.zeros(16)))


def test_trailing_bytes_are_length_error():
    with pytest.raises(LengthError):
        decode_sequence(ncg_bytes(1, 2, 2, np.zeros(5)))


def test_short_header_is_length_error():
    with pytest.raises(LengthError):
        decode_sequence(b"NCG1\x01\x00")


def test_bad_magic_and_version():
    with pytest.raises(FormatError):
        decode_sequence(ncg_bytes(1, 1, 1, [0], magic=b"XXXX"))
    with pytest.raises(FormatError):
        decode_sequence(ncg_bytes(1, 1, 1, [0], version=2))


@pytest.mark.parametrize("bad", [np.nan, -1.0, np.inf])
def test_invalid_values_name_the_frame(bad):
    vals = np.zeros(12)
    vals[9] = bad  # frame 2 of 3 frames of 2x2
    with pytest.raises(DataError, match="frame 2"):
        decode_sequence(ncg_bytes(3, 2, 2, vals))


def test_mismatched_frames_rejected_before_write(tmp_path):
    frames = (GridFrame(np.zeros((2, 2)), 0), GridFrame(np.zeros((3, 2)), 1800))
    with pytest.raises(DimensionError):
        write_sequence(Sequence(frames), tmp_path / "x.ncg")
    assert not (tmp_path / "x.ncg").exists()


def test_timestamps_must_be_regular():
    frames = (GridFrame(np.zeros((2, 2)), 0), GridFrame(np.zeros((2, 2)), 1000))
    with pytest.raises(DataError):
        Sequence(frames, 1800)


def test_frames_are_read_only():
    f = GridFrame(np.ones((2, 2)))
    with pytest.raises(ValueError):
        f.values[0, 0] = 3


# ----------------------------------------------------------------- windowing

@pytest.mark.parametrize("T,count", [(12, 1), (14, 3), (11, 0)])
def test_window_counts(T, count):
    seq = Sequence.from_array(np.zeros((T, 2, 2)))
    samples = window(seq)
    assert len(samples) == count
    assert [s.start for s in samples] == list(range(count))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4))
def test_window_count_formula_and_order(T, n_in, n_out, stride):
    arr = np.arange(T, dtype=np.float32)[:, None, None] * np.ones((1, 1, 2), np.float32)
    samples = window(Sequence.from_array(arr), WindowConfig(n_in, n_out, stride))
    expect = (T - n_in - n_out) // stride + 1 if T >= n_in + n_out else 0
    assert len(samples) == expect
    for s in samples:
        full = np.concatenate([s.input_array(), s.target_array()])[:, 0, 0]
        assert np.array_equal(full, np.arange(s.start, s.start + n_in + n_out))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.integers(1, 6), st.integers(1, 4))
def test_stride_one_windows_cover_every_frame(T, n_in, n_out):
    if T < n_in + n_out:
        return
    arr = np.arange(T, dtype=np.float32)[:, None, None]
    seen = set()
    for s in window(Sequence.from_array(arr), WindowConfig(n_in, n_out, 1)):
        seen.update(np.concatenate([s.input_array(), s.target_array()]).ravel().tolist())
    assert seen == set(range(T))


def test_stack_samples_shapes():
    seq = synthesize(SynthConfig(height=8, width=8, n_frames=14))
    x, y = stack_samples(window(seq))
    assert x.shape == (3, 9, 8, 8) and y.shape == (3, 3, 8, 8) and x.dtype == np.float64


# ----------------------------------------------------------------- transform

def test_transform_examples():
    assert transform(0.0) == 0.0 and inverse_transform(0.0) == 0.0
    assert transform(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert transform(250.0) == pytest.approx(math.log(101.0))
    assert inverse_transform(transform(250.0)) == pytest.approx(100.0)


def test_transform_rejects_negative():
    with pytest.raises(DataError):
        transform(np.array([1.0, -0.5]))


def test_inverse_clamps_at_zero():
    assert inverse_transform(-3.0) == 0.0


@settings(max_examples=200)
@given(st.floats(0, 100), st.floats(0, 100))
def test_transform_monotone_and_invertible(a, b):
    if a < b:
        assert transform(a) < transform(b)
    assert inverse_transform(transform(a)) == pytest.approx(a, abs=1e-6)


# ----------------------------------------------------------------- synthesis

def test_synth_zero_case():
    seq = synthesize(SynthConfig(height=6, width=7, n_frames=4, n_cells=0, noise_std=0))
    assert len(seq) == 4 and np.all(seq.array() == 0)


def test_synth_deterministic():
    cfg = SynthConfig(height=16, width=16, n_frames=6, noise_std=0.5, seed=11)
    assert encode_sequence(synthesize(cfg)) == encode_sequence(synthesize(cfg))
    other = SynthConfig(height=16, width=16, n_frames=6, noise_std=0.5, seed=12)
    assert encode_sequence(synthesize(cfg)) != encode_sequence(synthesize(other))


def test_synth_nonnegative_with_noise():
    seq = synthesize(SynthConfig(height=16, width=16, n_frames=4, noise_std=2.0))
    assert seq.array().min() >= 0


def test_single_cell_translates_right():
    # oracle: the closed-form Gaussian re-evaluated at the shifted centre
    cell = Cell(y0=16.0, x0=8.0, vy=0.0, vx=1.0, intensity=10.0, sigma_major=4.0,
                sigma_minor=2.5, angle=0.4)
    frames = render_cells([cell], 8, 32, 32)
    yy, xx = np.mgrid[0:32, 0:32]
    c, s = math.cos(0.4), math.sin(0.4)
    for t in range(8):
        dx, dy = xx - (8.0 + t), yy - 16.0
        u, v = c * dx + s * dy, -s * dx + c * dy
        oracle = 10.0 * np.exp(-0.5 * ((u / 4.0) ** 2 + (v / 2.5) ** 2))
        assert np.max(np.abs(frames[t] - oracle)) < 1e-5
        # interior pixels of frame t equal frame 0 shifted t pixels right
        assert np.max(np.abs(frames[t][:, t:] - frames[0][:, :32 - t])) < 1e-5


def test_growth_and_spin():
    base = Cell(10, 10, 0, 0, 5.0, growth=0.1, sigma_major=4, sigma_minor=2, spin=0.2)
    f0, f3 = base.render(0, 21, 21), base.render(3, 21, 21)
    assert f3.max() == pytest.approx(5.0 * math.exp(0.3), rel=1e-12)
    rotated = Cell(10, 10, 0, 0, 5.0 * math.exp(0.3), sigma_major=4, sigma_minor=2, angle=0.6)
    assert np.allclose(f3, rotated.render(0, 21, 21), atol=1e-12)
    assert not np.allclose(f0 * math.exp(0.3), f3)


def test_events_are_independent_and_reproducible():
    cfg = SynthConfig(height=8, width=8, n_frames=3, seed=5)
    a = synthesize_events(cfg, 4)
    b = synthesize_events(cfg, 4)
    assert all(x == y for x, y in zip(a, b))
    assert len({encode_sequence(s) for s in a}) == 4


@pytest.mark.parametrize("kw", [dict(height=0), dict(n_cells=-1), dict(noise_std=-1),
                                dict(sigma_range=(0.0, 2.0)), dict(velocity_range=(2, 1))])
def test_synth_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)
