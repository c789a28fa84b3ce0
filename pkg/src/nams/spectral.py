"""One-sided DFT, STFT, Hilbert envelope and Schroeder integration.

Every transform works on the fixed 24 kHz / 2400-sample frame used by the
renderer, the losses and the metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert

SAMPLE_RATE = 24000
FRAME_LEN = 2400
EDC_FLOOR_DB = -120.0
STFT_SIZES = (512, 1024, 2048)


@dataclass(frozen=True)
class SpectralGrid:
    sample_rate: int = SAMPLE_RATE
    frame_len: int = FRAME_LEN

    def __post_init__(self):
        if self.frame_len % 2:
            raise ValueError("frame_len must be even")

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def bin_freqs(self) -> np.ndarray:
        return np.arange(self.n_bins) * (self.sample_rate / self.frame_len)


GRID = SpectralGrid()


@dataclass
class ComplexSpectrum:
    bins: np.ndarray
    grid: SpectralGrid = GRID

    def __post_init__(self):
        if self.bins.shape[-1] != self.grid.n_bins:
            raise ValueError(
                f"spectrum has {self.bins.shape[-1]} bins, grid expects {self.grid.n_bins}"
            )


def forward_dft(signal, grid: SpectralGrid = GRID) -> ComplexSpectrum:
    """One-sided DFT of ``signal`` zero-padded to ``grid.frame_len``.

    Leading axes are treated as a batch.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] > grid.frame_len:
        raise ValueError(f"signal length {x.shape[-1]} exceeds frame length {grid.frame_len}")
    return ComplexSpectrum(np.fft.rfft(x, n=grid.frame_len, axis=-1), grid)


def inverse_dft(spectrum: ComplexSpectrum) -> np.ndarray:
    bins = np.asarray(spectrum.bins)
    if bins.shape[-1] != spectrum.grid.n_bins:
        raise ValueError("malformed spectrum")
    return np.fft.irfft(bins, n=spectrum.grid.frame_len, axis=-1)


def hann(size: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(size) / size)


def frame_count(length: int, fft_size: int, hop: int) -> int:
    if length < fft_size:
        return 1
    return (length - fft_size) // hop + 1


def frame_indices(length: int, fft_size: int, hop: int) -> np.ndarray:
    """Sample index matrix [frames x fft_size]; entries >= length are padding."""
    n = frame_count(length, fft_size, hop)
    return np.arange(n)[:, None] * hop + np.arange(fft_size)[None, :]


def stft(signal, fft_size: int, hop: int | None = None) -> np.ndarray:
    """Hann-windowed short-time transform, shape [frames x (fft_size//2 + 1)]."""
    x = np.asarray(signal, dtype=np.float64)
    hop = fft_size // 4 if hop is None else hop
    idx = frame_indices(len(x), fft_size, hop)
    padded = np.concatenate([x, np.zeros(max(0, idx.max() + 1 - len(x)))])
    return np.fft.rfft(padded[idx] * hann(fft_size), axis=-1)


def hilbert_envelope(signal) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    return np.abs(hilbert(x))


def schroeder_edc(rir) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, 0 dB at t=0, floored at -120 dB."""
    h = np.asarray(rir, dtype=np.float64)
    peak = np.max(np.abs(h)) if h.size else 0.0
    if peak > 0:
        # the curve is relative, so rescale first; tiny samples would otherwise square to zero
        h = h / peak
    energy = np.cumsum((h * h)[::-1])[::-1]
    total = energy[0]
    if not total > 0:
        raise ValueError("all-zero RIR has no decay curve")
    with np.errstate(divide="ignore"):
        edc = 10 * np.log10(energy / total)
    edc = np.maximum(edc, EDC_FLOOR_DB)
    # guard against rounding making the curve tick upward
    return np.minimum.accumulate(edc)
