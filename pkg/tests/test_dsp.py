import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dastraffic import dsp
from dastraffic.errors import ConfigError

FS = 250.0


def _rms(x):
    return np.sqrt(np.mean(np.square(x)))


def _fit_slope(y):
    k = np.arange(y.size, dtype=float)
    return np.polyfit(k, y, 1)[0]


def test_detrend_examples():
    np.testing.assert_allclose(dsp.detrend([1, 2, 3, 4]), 0, atol=1e-12)
    np.testing.assert_allclose(dsp.detrend([5, 5, 5]), 0, atol=1e-12)
    t = np.arange(500) / FS
    y = dsp.detrend(np.sin(2 * np.pi * 3 * t) + 0.5 * t)
    assert abs(_fit_slope(y)) < 1e-6
    assert abs(y.mean()) < 1e-12


def test_detrend_rejects_short():
    with pytest.raises(ConfigError):
        dsp.detrend([1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 200), elements=st.floats(-1e3, 1e3)))
def test_detrend_is_projection(x):
    once = dsp.detrend(x)
    np.testing.assert_allclose(dsp.detrend(once), once, atol=1e-8)
    k = np.arange(x.size) - (x.size - 1) / 2
    assert abs(np.dot(k, once)) < 1e-6 * max(1.0, np.abs(x).max() * x.size ** 2)


def test_bandpass_passes_10hz_and_rejects_60hz():
    t = np.arange(int(30 * FS)) / FS
    steady = slice(int(5 * FS), int(25 * FS))
    for freq, check in ((10.0, "pass"), (60.0, "stop")):
        x = np.sin(2 * np.pi * freq * t)
        y = dsp.bandpass(x, FS)
        db = 20 * np.log10(_rms(y[steady]) / _rms(x[steady]))
        if check == "pass":
            assert abs(db) <= 1.0
        else:
            assert db <= -20.0


def test_bandpass_zero_and_length():
    z = dsp.bandpass(np.zeros(1000), FS)
    assert z.shape == (1000,) and np.all(z == 0)


def test_bandpass_invalid_band():
    for lo, hi in ((0.0, 30.0), (30.0, 10.0), (1.0, 125.0)):
        with pytest.raises(ConfigError):
            dsp.bandpass(np.ones(1000), FS, lo, hi)


def test_bandpass_is_zero_phase():
    n = 5001
    k = np.arange(n)
    for center in (2000, 2500, 3100):
        pulse = np.exp(-0.5 * ((k - center) / 12.0) ** 2) * np.cos(2 * np.pi * 10 * (k - center) / FS)
        y = dsp.bandpass(pulse, FS)
        assert abs(int(np.argmax(np.abs(y))) - center) <= 1


def test_hamming_examples():
    assert dsp.hamming(5).tolist() == [0.08, 0.54, 1.0, 0.54, 0.08]
    np.testing.assert_array_equal(dsp.hamming(1), [1.0])
    w = dsp.hamming(500)
    assert w[0] == pytest.approx(0.08) and w[-1] == pytest.approx(0.08)
    np.testing.assert_array_equal(w, w[::-1])
    k = np.arange(500)
    np.testing.assert_allclose(w, 0.54 - 0.46 * np.cos(2 * np.pi * k / 499), atol=1e-15)
    assert np.argmax(w) in (249, 250)
    assert w.max() == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ConfigError):
        dsp.hamming(0)


def test_window_grid():
    g = dsp.WindowGrid()
    assert (g.n_win, g.n_shift) == (500, 125)
    with pytest.raises(ConfigError):
        dsp.WindowGrid(win_s=0.5, shift_s=1.0)
    with pytest.raises(ConfigError):
        dsp.WindowGrid(win_s=0.001, fs=250)


def test_segment_counts():
    g = dsp.WindowGrid()
    assert len(dsp.segment_windows(np.zeros(22500), g)) == 177
    assert len(dsp.segment_windows(np.zeros(500), g)) == 1
    with pytest.raises(ConfigError, match="signal too short"):
        dsp.segment_windows(np.zeros(499), g)


def test_segment_constant_signal_is_scaled_window():
    g = dsp.WindowGrid()
    frames = dsp.segment_windows(np.full(1000, 3.0), g)
    for fr in frames:
        np.testing.assert_allclose(fr.samples, 3.0 * dsp.hamming(500))


@settings(max_examples=30, deadline=None)
@given(st.integers(500, 4000), st.sampled_from([(2.0, 0.5), (1.0, 1.0), (2.0, 0.25)]))
def test_segment_offsets_reconstruct(n, ws):
    g = dsp.WindowGrid(*ws)
    x = np.arange(n, dtype=float)
    frames = dsp.segment_windows(x, g)
    assert len(frames) == (n - g.n_win) // g.n_shift + 1
    w = dsp.hamming(g.n_win)
    for fr in frames:
        off = int(round(fr.t_start_s * g.fs))
        assert off == fr.index * g.n_shift
        np.testing.assert_allclose(fr.samples, x[off:off + g.n_win] * w)
