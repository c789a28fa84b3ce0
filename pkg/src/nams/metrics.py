"""Room-acoustic evaluation metrics between a predicted and a reference RIR."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .spectral import GRID, hilbert_envelope, schroeder_edc

C50_SAMPLES = int(0.05 * GRID.sample_rate)
RATIO_CLAMP = (1e-12, 1e12)
COLUMNS = {"phase": "Phase", "amplitude": "Amp.", "envelope": "Env.", "t60": "T60", "c50": "C50", "edt": "EDT"}


class MetricUnavailable(ValueError):
    """The decay curve does not cover the range a metric needs."""


def _spectra(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch {p.shape} vs {t.shape}")
    n = max(GRID.frame_len, len(t) + len(t) % 2)
    return np.fft.rfft(p, n=n), np.fft.rfft(t, n=n)


def phase_error(pred, truth) -> float:
    """Mean absolute wrapped phase difference over all one-sided bins."""
    p, t = _spectra(pred, truth)
    # angle of p * conj(t), written out so identical or negated inputs give exactly 0 or pi
    cross_im = p.imag * t.real - p.real * t.imag
    cross_re = p.real * t.real + p.imag * t.imag
    return float(np.mean(np.abs(np.arctan2(cross_im, cross_re))))


def amplitude_error(pred, truth) -> float:
    p, t = _spectra(pred, truth)
    ref = np.abs(t).sum()
    if ref == 0:
        raise ValueError("reference RIR is all zeros")
    return float(np.abs(np.abs(p) - np.abs(t)).sum() / ref)


def envelope_error(pred, truth) -> float:
    """Relative L1 difference of Hilbert envelopes, in percent."""
    ep = hilbert_envelope(pred)
    et = hilbert_envelope(truth)
    ref = et.sum()
    if ref == 0:
        raise ValueError("reference RIR is all zeros")
    return float(100 * np.abs(ep - et).sum() / ref)


def _fit_slope(edc: np.ndarray, start: int, stop: int, sample_rate: int):
    t = np.arange(start, stop) / sample_rate
    slope, intercept = np.polyfit(t, edc[start:stop], 1)
    return slope, intercept


def t60(rir, sample_rate: int = GRID.sample_rate) -> float:
    """Reverberation time from a line fit to the decay curve between -5 and -25 dB."""
    edc = schroeder_edc(rir)
    below5 = np.flatnonzero(edc <= -5.0)
    below25 = np.flatnonzero(edc <= -25.0)
    if len(below25) == 0 or len(below5) == 0:
        raise MetricUnavailable("decay never reaches -25 dB")
    start, stop = below5[0], below25[0] + 1
    if stop - start < 2:
        raise MetricUnavailable("decay from -5 to -25 dB spans fewer than two samples")
    slope, _ = _fit_slope(edc, start, stop, sample_rate)
    if slope >= 0:
        raise MetricUnavailable("decay curve is not decreasing")
    return -60.0 / slope


def edt(rir, sample_rate: int = GRID.sample_rate) -> float:
    """Early decay time: 6x the 10 dB decay time of a line fitted from the peak to -10 dB."""
    h = np.asarray(rir, dtype=np.float64)
    edc = schroeder_edc(h)
    onset = int(np.argmax(h * h))
    below10 = np.flatnonzero(edc[onset:] <= -10.0)
    if len(below10) == 0:
        raise MetricUnavailable("decay never reaches -10 dB")
    stop = onset + below10[0] + 1
    if stop - onset < 2:
        raise MetricUnavailable("decay to -10 dB spans fewer than two samples")
    slope, _ = _fit_slope(edc, onset, stop, sample_rate)
    if slope >= 0:
        raise MetricUnavailable("decay curve is not decreasing")
    return 6 * (-10.0 / slope)


def c50(rir, sample_rate: int = GRID.sample_rate) -> float:
    h = np.asarray(rir, dtype=np.float64)
    split = int(round(0.05 * sample_rate))
    early = np.sum(h[:split] ** 2)
    late = np.sum(h[split:] ** 2)
    lo, hi = RATIO_CLAMP
    if late == 0:
        ratio = hi if early > 0 else 1.0
    else:
        ratio = min(max(early / late, lo), hi)
    return 10 * math.log10(ratio)


def t60_error(pred, truth) -> float:
    ref = t60(truth)
    return 100 * abs(t60(pred) - ref) / ref


def c50_error(pred, truth) -> float:
    return abs(c50(pred) - c50(truth))


def edt_error(pred, truth) -> float:
    """Absolute EDT difference in milliseconds."""
    return 1000 * abs(edt(pred) - edt(truth))


@dataclass
class MetricReport:
    phase: float
    amplitude: float
    envelope: float
    t60: float | None
    c50: float
    edt: float | None

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_pair(pred, truth) -> MetricReport:
    def guarded(fn):
        try:
            return fn(pred, truth)
        except MetricUnavailable:
            return None

    return MetricReport(
        phase=phase_error(pred, truth),
        amplitude=amplitude_error(pred, truth),
        envelope=envelope_error(pred, truth),
        t60=guarded(t60_error),
        c50=c50_error(pred, truth),
        edt=guarded(edt_error),
    )


def aggregate(reports) -> dict:
    """Mean of each metric over receivers; unavailable T60/EDT pairs are excluded and counted."""
    out = {}
    for key in COLUMNS:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
        out[f"{key}_count"] = len(vals)
    out["pairs"] = len(reports)
    return out
