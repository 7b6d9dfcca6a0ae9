"""Strain-rate preprocessing: detrending, zero-phase band-pass, windowing."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .errors import ConfigError

FILTER_ORDER = 4


@dataclass(frozen=True)
class WindowGrid:
    win_s: float = 2.0
    shift_s: float = 0.5
    fs: float = 250.0

    def __post_init__(self):
        if self.fs <= 0:
            raise ConfigError("fs must be positive")
        if self.n_win < 1 or self.n_shift < 1:
            raise ConfigError("window and shift must span at least one sample")
        if self.n_shift > self.n_win:
            raise ConfigError("shift must not exceed window length")

    @property
    def n_win(self) -> int:
        return int(round(self.win_s * self.fs))

    @property
    def n_shift(self) -> int:
        return int(round(self.shift_s * self.fs))

    def count(self, n_samples: int) -> int:
        """Number of whole windows that fit in ``n_samples``."""
        if n_samples < self.n_win:
            return 0
        return (n_samples - self.n_win) // self.n_shift + 1

    def offsets(self, n_samples: int) -> np.ndarray:
        return np.arange(self.count(n_samples)) * self.n_shift


@dataclass
class WindowFrame:
    sp: int
    index: int
    samples: np.ndarray
    t_start_s: float


def detrend(x) -> np.ndarray:
    """Remove the least-squares straight line from ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ConfigError("detrend needs a 1-D signal of at least 2 samples")
    k = np.arange(x.size, dtype=float)
    k -= k.mean()
    xc = x - x.mean()
    slope = np.dot(k, xc) / np.dot(k, k)
    return xc - slope * k


@lru_cache(maxsize=32)
def _butter_sos(fs: float, lo: float, hi: float, order: int):
    return signal.butter(order, (lo, hi), btype="bandpass", fs=fs, output="sos")


def bandpass(x, fs: float, lo: float = 0.1, hi: float = 30.0) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass (forward and backward)."""
    if not (0 < lo < hi < fs / 2):
        raise ConfigError(f"invalid band {lo}-{hi} Hz for fs={fs}")
    x = np.asarray(x, dtype=float)
    sos = _butter_sos(float(fs), float(lo), float(hi), FILTER_ORDER)
    # Mirror (even) padding: odd padding leaves a step at the boundary that
    # the 0.1 Hz section rings on for tens of seconds.
    padlen = min(3 * FILTER_ORDER, x.shape[-1] - 1)
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=max(padlen, 0))


def preprocess(x, fs: float, lo: float = 0.1, hi: float = 30.0) -> np.ndarray:
    """Detrend then band-pass one trace or every row of a matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return bandpass(detrend(x), fs, lo, hi)
    return np.stack([bandpass(detrend(row), fs, lo, hi) for row in x])


def hamming(n: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("hamming window needs n >= 1")
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    # (27 - 23 cos)/50 is 0.54 - 0.46 cos, but 0.54 - 0.46 is not 0.08 in
    # binary; this form lands exactly on 0.08, 0.54 and 1.0.
    w = (27.0 - 23.0 * np.cos(2 * np.pi * k / (n - 1))) / 50.0
    w[n - n // 2:] = w[:n // 2][::-1]
    return w


def frame_matrix(x, grid: WindowGrid) -> np.ndarray:
    """All Hamming-weighted windows of ``x`` as a (count, n_win) array."""
    x = np.asarray(x, dtype=float)
    if x.size < grid.n_win:
        raise ConfigError("signal too short")
    view = np.lib.stride_tricks.sliding_window_view(x, grid.n_win)[::grid.n_shift]
    return view * hamming(grid.n_win)


def segment_windows(x, grid: WindowGrid, sp: int = 0) -> list[WindowFrame]:
    frames = frame_matrix(x, grid)
    return [WindowFrame(sp, i, row, i * grid.n_shift / grid.fs) for i, row in enumerate(frames)]
