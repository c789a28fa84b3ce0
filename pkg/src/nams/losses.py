"""Six-term training objective on rendered vs. reference RIRs."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .spectral import GRID, STFT_SIZES, hann

MRSTFT_EPS = 1e-7
EDC_EPS = 1e-8
PHASE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    spectral: float = 1.0
    amplitude: float = 0.5
    phase: float = 0.5
    time: float = 100.0
    mrstft: float = 1.0
    edc: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TERMS = tuple(f.name for f in fields(LossWeights))


@dataclass
class LossReport:
    terms: dict
    total: ad.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def value(self) -> float:
        return float(ad.value_of(self.total))


def time_loss(pred, truth):
    return ad.mean(ad.abs(pred - truth))


def spectral_loss(pred_spec, truth_spec: np.ndarray):
    re = ad.abs(ad.real(pred_spec) - truth_spec.real)
    im = ad.abs(ad.imag(pred_spec) - truth_spec.imag)
    return ad.mean(re + im)


def amplitude_loss(pred_spec, truth_spec: np.ndarray):
    return ad.mean(ad.abs(ad.abs(pred_spec) - np.abs(truth_spec)))


def phase_loss(pred_spec, truth_spec: np.ndarray):
    """Magnitude-weighted 1 - cos of the phase difference, weights summing to one."""
    mag = np.abs(truth_spec)
    total = mag.sum()
    # w_k * cos(dphi) = Re(P conj(T)) / (|P| * sum|T|)
    cross = ad.real(pred_spec * (np.conj(truth_spec) / total))
    cosine = ad.sum(cross / (ad.abs(pred_spec) + PHASE_EPS))
    return 1.0 - cosine


def stft_magnitude(signal, fft_size: int):
    framed = ad.frames(signal, fft_size, fft_size // 4) * hann(fft_size)
    return ad.abs(ad.dft(framed, fft_size))


def mrstft_loss(pred, truth: np.ndarray):
    total = 0.0
    for size in STFT_SIZES:
        p = stft_magnitude(pred, size)
        t = ad.value_of(stft_magnitude(truth, size))
        sc = ad.l2norm(p - t) / np.linalg.norm(t)
        mag = ad.mean(ad.abs(ad.log(p + MRSTFT_EPS) - np.log(t + MRSTFT_EPS)))
        total = total + sc + mag
    return total


def edc_loss(pred, truth: np.ndarray):
    pe = ad.rcumsum(ad.square(pred))
    te = np.flip(np.cumsum(np.flip(truth * truth)))
    return ad.mean(ad.abs(ad.log10(pe + EDC_EPS) - np.log10(te + EDC_EPS)))


def total_loss(pred, truth, weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted six-term loss between a predicted and a reference RIR.

    ``pred`` may be a tensor (differentiable) or an array; ``truth`` is an array.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pv = ad.value_of(pred)
    if pv.shape != truth.shape:
        raise ValueError(f"length mismatch: pred {pv.shape} vs truth {truth.shape}")
    if not np.any(truth):
        raise ValueError("reference RIR is all zeros")
    n = GRID.frame_len if len(truth) <= GRID.frame_len else len(truth)
    pred_spec = ad.dft(pred, n)
    truth_spec = np.fft.rfft(truth, n=n)
    terms = {
        "spectral": spectral_loss(pred_spec, truth_spec),
        "amplitude": amplitude_loss(pred_spec, truth_spec),
        "phase": phase_loss(pred_spec, truth_spec),
        "time": time_loss(pred, truth),
        "mrstft": mrstft_loss(pred, truth),
        "edc": edc_loss(pred, truth),
    }
    w = weights.as_dict()
    total = 0.0
    for name in TERMS:
        total = total + w[name] * terms[name]
    if not isinstance(total, ad.Tensor):
        total = ad.Tensor(total)
    return LossReport({k: float(ad.value_of(v)) for k, v in terms.items()}, total, weights)
