"""Differentiable far-field multipole rendering.

Each pole contributes its emitted spectrum, delayed by r/c, attenuated by 1/r
and shaped by an energy-normalized spherical-harmonic directivity.  The
functions accept plain arrays or autodiff tensors; inside a tape they are
differentiable with respect to pole positions, emitted signals and
directivity coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .spectral import GRID, SpectralGrid
from .spherical import R_MIN, sh_cartesian

SPEED_OF_SOUND = 343.0
NORM_EPS = 1e-12


@dataclass
class RirSignal:
    samples: np.ndarray
    receiver: np.ndarray
    source: np.ndarray | None = None
    sample_rate: int = GRID.sample_rate

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.receiver = np.asarray(self.receiver, dtype=np.float64)
        if self.samples.shape != (GRID.frame_len,):
            raise ValueError(f"RIR must have {GRID.frame_len} samples, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("RIR contains non-finite samples")


def sh_matrix(directions, order: int):
    """[P, 3] unit directions -> [P, (order+1)^2] harmonic values."""
    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    return ad.stack(sh_cartesian(order, x, y, z), axis=-1)


def directivity_response(coeffs, sh_values, grid: SpectralGrid = GRID):
    """Energy-normalized directivity spectrum per pole.

    coeffs: [P, C, L] time-domain harmonic coefficients.
    sh_values: [P, C] harmonics evaluated at each pole's direction.
    Returns [P, n_bins] complex, each row with unit L2 norm over all bins.
    """
    cv = ad.value_of(coeffs)
    p, c, _ = cv.shape
    weighted = ad.reshape(sh_values, (p, c, 1)) * coeffs
    # the transform is linear, so sum the channels before transforming them
    pattern = ad.sum(weighted, axis=1)
    spectrum = ad.dft(pattern, grid.frame_len)
    norm = ad.l2norm(spectrum, axis=1, keepdims=True)
    return spectrum / (norm + NORM_EPS)


def delay_kernel(grid: SpectralGrid = GRID, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """-j 2 pi f / c on the bin grid."""
    return -2j * math.pi / c * grid.bin_freqs


def propagation_phasor(r: np.ndarray, grid: SpectralGrid = GRID, c: float = SPEED_OF_SOUND, block: int = 40):
    """exp(-j 2 pi f_k r / c) for distances r [P] -> [P, n_bins].

    The bin frequencies are an arithmetic sequence, so the phasor factors into
    a coarse and a fine exponential; far fewer complex exps than bins.
    """
    r = np.asarray(r, dtype=np.float64).reshape(-1, 1)
    step = -2j * math.pi / c * (grid.sample_rate / grid.frame_len)
    n = grid.n_bins
    coarse_count = -(-n // block)
    fine = np.exp(r * (step * np.arange(block)))
    coarse = np.exp(r * (step * block * np.arange(coarse_count)))
    out = (coarse[:, :, None] * fine[:, None, :]).reshape(len(r), -1)
    return out[:, :n]


def superpose(emitted, pattern, r, grid: SpectralGrid = GRID, c: float = SPEED_OF_SOUND):
    """H = sum_p E_p * (D_p / |D_p|) * exp(-j w r_p / c) / r_p  ->  [n_bins].

    emitted, pattern: [P, n_bins] complex spectra; r: [P, 1] clamped distances.
    A single recorded operation, so only its three inputs and the phasor are
    kept for the backward pass.
    """
    ev, dv = ad.value_of(emitted), ad.value_of(pattern)
    rv = ad.value_of(r).reshape(-1)
    norm = np.sqrt(np.sum(dv.real**2 + dv.imag**2, axis=1))
    q = 1.0 / (rv * (norm + NORM_EPS))
    phasor = propagation_phasor(rv, grid, c)
    dphi = dv * phasor
    u = ev * dphi
    out = q @ u
    kernel = delay_kernel(grid, c)

    def vjp(g):
        g = np.asarray(g, dtype=np.complex128)
        # Re(conj(u) @ x) without materializing conj(u)
        a = (u @ np.conj(g)).real
        qg = q[:, None] * g[None, :]
        ge = np.conj(dphi) * qg if ad._needs_grad(emitted) else None
        gd = None
        if ad._needs_grad(pattern):
            gd = np.conj(ev * phasor) * qg
            gn = -a * q / (norm + NORM_EPS)
            safe = np.where(norm > 0, norm, 1.0)
            gd += (np.where(norm > 0, gn / safe, 0.0))[:, None] * dv
        gr = None
        if ad._needs_grad(r):
            gr = q * (u @ np.conj(g * np.conj(kernel))).real - a * q / rv
            gr = gr.reshape(-1, 1)
        return ge, gd, gr

    return ad.record("superpose", out, (emitted, pattern, r), vjp)


def audible_poles(positions: np.ndarray, receiver, grid: SpectralGrid = GRID, c: float = SPEED_OF_SOUND):
    """Indices of poles whose direct delay fits inside the frame."""
    dist = np.linalg.norm(np.asarray(positions) - np.asarray(receiver)[None, :], axis=1)
    return np.flatnonzero(dist <= c * grid.frame_len / grid.sample_rate)


def render_spectrum(
    positions,
    signals,
    coeffs,
    receiver,
    order: int,
    grid: SpectralGrid = GRID,
    c: float = SPEED_OF_SOUND,
    r_min: float = R_MIN,
):
    """Superpose the poles at one receiver; returns the one-sided spectrum [n_bins].

    positions [P, 3], signals [P, L], coeffs [P, C, L] are assumed already
    restricted to the poles that should be heard (see :func:`audible_poles`).
    """
    receiver = np.asarray(receiver, dtype=np.float64)
    p = ad.value_of(positions).shape[0]
    if p == 0:
        raise ValueError("cannot render without alive poles")
    rel = positions - receiver[None, :]
    dist = ad.l2norm(rel, axis=1, keepdims=True)
    direction = rel / ad.clamp_min(dist, 1e-12)
    r = ad.clamp_min(dist, r_min)
    sh = sh_matrix(direction, order)
    c_count = ad.value_of(coeffs).shape[1]
    pattern = ad.sum(ad.reshape(sh, (p, c_count, 1)) * coeffs, axis=1)
    return superpose(ad.dft(signals, grid.frame_len), ad.dft(pattern, grid.frame_len), r, grid, c)


def synthesize_rir(
    positions,
    signals,
    coeffs,
    receiver,
    order: int,
    grid: SpectralGrid = GRID,
    c: float = SPEED_OF_SOUND,
    r_min: float = R_MIN,
):
    """Time-domain RIR (length ``grid.frame_len``) at one receiver."""
    spectrum = render_spectrum(positions, signals, coeffs, receiver, order, grid, c, r_min)
    return ad.idft(spectrum, grid.frame_len)


def band_bins(center_hz: float, grid: SpectralGrid = GRID) -> np.ndarray:
    """Bin indices inside the 1/3-octave band around ``center_hz``."""
    lo, hi = center_hz / 2 ** (1 / 6), center_hz * 2 ** (1 / 6)
    if hi > grid.sample_rate / 2:
        raise ValueError(f"band around {center_hz} Hz exceeds Nyquist")
    f = grid.bin_freqs
    return np.flatnonzero((f >= lo) & (f <= hi))


def spatial_magnitude_map(spectrum_at, xs, ys, height: float, band_hz: float, grid: SpectralGrid = GRID):
    """Mean |H(f)| over a 1/3-octave band on the plane z = height -> [len(ys), len(xs)].

    ``spectrum_at(receiver)`` returns the one-sided spectrum at a receiver.
    """
    bins = band_bins(band_hz, grid)
    if len(bins) == 0:
        raise ValueError(f"no bins inside the band around {band_hz} Hz")
    out = np.empty((len(ys), len(xs)))
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            spec = np.asarray(ad.value_of(spectrum_at(np.array([x, y, height], dtype=np.float64))))
            out[i, j] = np.mean(np.abs(spec[bins]))
    return out
