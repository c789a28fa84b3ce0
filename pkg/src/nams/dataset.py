"""RIR corpora: image-source generation, WAV/manifest I/O, resampling, splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .renderer import SPEED_OF_SOUND, RirSignal, propagation_phasor
from .spectral import GRID, SpectralGrid

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
RESAMPLER_TAPS = 64
KAISER_BETA = 8.6


class CorpusError(Exception):
    """Problems with a corpus on disk; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ShoeboxSpec:
    dims: tuple
    # reflection coefficients for the walls x=0, x=Lx, y=0, y=Ly, z=0, z=Lz
    beta: tuple
    source: tuple
    receiver: tuple
    max_order: int = 64

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValueError("room dimensions must be three positive lengths")
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (6,) or np.any(beta < 0) or np.any(beta >= 1):
            raise ValueError("need six reflection coefficients in [0, 1)")
        for name in ("source", "receiver"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
                raise ValueError(f"{name} {tuple(p)} is not strictly inside the room")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")


def eyring_beta(dims, t60: float) -> float:
    """Uniform pressure reflection coefficient giving an Eyring reverberation time ``t60``."""
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    absorption = 1 - math.exp(-0.161 * volume / (surface * t60))
    return math.sqrt(1 - absorption)


def eyring_t60(dims, beta: float) -> float:
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    return 0.161 * volume / (-surface * math.log(beta * beta))


def image_sources(spec: ShoeboxSpec, max_distance: float):
    """Image distances and amplitudes within ``max_distance`` of the receiver.

    Classical mirrored-image enumeration: for each lattice index n and parity
    q per axis, the image lies at (1 - 2q) * s + 2 n L.  An image is kept when
    its total number of wall reflections is at most ``spec.max_order``.
    """
    dims = np.asarray(spec.dims, dtype=float)
    src = np.asarray(spec.source, dtype=float)
    rec = np.asarray(spec.receiver, dtype=float)
    beta = np.asarray(spec.beta, dtype=float).reshape(3, 2)
    k = spec.max_order
    axes = []
    for axis in range(3):
        bound = min(k, int(math.ceil(max_distance / (2 * dims[axis]))) + 1)
        n = np.arange(-bound, bound + 1)
        q = np.array([0, 1])
        nn, qq = np.meshgrid(n, q, indexing="ij")
        nn, qq = nn.ravel(), qq.ravel()
        coord = (1 - 2 * qq) * src[axis] + 2 * nn * dims[axis] - rec[axis]
        low_hits = np.abs(nn - qq)
        high_hits = np.abs(nn)
        gain = beta[axis, 0] ** low_hits * beta[axis, 1] ** high_hits
        axes.append((coord, low_hits + high_hits, gain))
    (cx, hx, gx), (cy, hy, gy), (cz, hz, gz) = axes
    dist = np.sqrt(cx[:, None, None] ** 2 + cy[None, :, None] ** 2 + cz[None, None, :] ** 2)
    hits = hx[:, None, None] + hy[None, :, None] + hz[None, None, :]
    gain = gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    keep = (dist <= max_distance) & (hits <= k) & (gain > 0)
    d = dist[keep]
    return d, gain[keep] / d, hits[keep]


def image_source_rir(spec: ShoeboxSpec, grid: SpectralGrid = GRID, c: float = SPEED_OF_SOUND) -> RirSignal:
    """Band-limited ISM impulse response synthesized on the DFT grid."""
    if np.allclose(spec.source, spec.receiver):
        raise ValueError("source and receiver coincide")
    max_distance = c * grid.frame_len / grid.sample_rate
    dist, amp, _ = image_sources(spec, max_distance)
    spectrum = np.zeros(grid.n_bins, dtype=np.complex128)
    for start in range(0, len(dist), 512):
        sl = slice(start, start + 512)
        spectrum += amp[sl] @ propagation_phasor(dist[sl], grid, c)
    samples = np.fft.irfft(spectrum, n=grid.frame_len)
    return RirSignal(samples, np.asarray(spec.receiver, float), np.asarray(spec.source, float))


# ---------------------------------------------------------------- scenes


@dataclass
class SceneSpec:
    dims: tuple = (6.0, 4.0, 3.0)
    source: tuple = (1.5, 1.0, 1.4)
    t60: float = 0.3
    receivers: int = 200
    clearance: float = 0.3
    seed: int = 0
    max_order: int = 64

    @property
    def beta(self) -> float:
        return eyring_beta(self.dims, self.t60)


def sample_receivers(scene: SceneSpec) -> np.ndarray:
    dims = np.asarray(scene.dims, dtype=float)
    if np.any(dims <= 2 * scene.clearance):
        raise ValueError("room too small for the requested wall clearance")
    rng = np.random.default_rng(scene.seed)
    out = []
    src = np.asarray(scene.source, dtype=float)
    while len(out) < scene.receivers:
        p = rng.uniform(scene.clearance, dims - scene.clearance)
        if np.linalg.norm(p - src) >= 0.3:
            out.append(p)
    return np.array(out)


@dataclass
class RirCorpus:
    receivers: np.ndarray
    rirs: np.ndarray
    source: np.ndarray
    sample_rate: int = GRID.sample_rate
    room: dict | None = None
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.receivers)

    def subset(self, index) -> "RirCorpus":
        index = np.asarray(index, dtype=int)
        names = [self.names[i] for i in index] if self.names else []
        return RirCorpus(self.receivers[index], self.rirs[index], self.source, self.sample_rate, self.room, names)

    def bounds(self) -> tuple:
        """(center, half-diagonal) of the room box, or of the receiver cloud."""
        if self.room and "dims" in self.room:
            dims = np.asarray(self.room["dims"], dtype=float)
            return dims / 2, float(np.linalg.norm(dims) / 2)
        pts = np.vstack([self.receivers, self.source[None, :]])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return (lo + hi) / 2, max(float(np.linalg.norm(hi - lo) / 2), 1.0)


def generate_corpus(scene: SceneSpec, grid: SpectralGrid = GRID) -> RirCorpus:
    receivers = sample_receivers(scene)
    beta = (scene.beta,) * 6
    rirs = np.stack(
        [
            image_source_rir(ShoeboxSpec(scene.dims, beta, scene.source, tuple(r), scene.max_order), grid).samples
            for r in receivers
        ]
    )
    room = {"dims": list(scene.dims), "beta": list(beta), "t60_eyring": scene.t60}
    names = [f"rir_{i:04d}.wav" for i in range(len(receivers))]
    return RirCorpus(receivers, rirs, np.asarray(scene.source, float), grid.sample_rate, room, names)


# ---------------------------------------------------------------- disk I/O


def write_corpus(corpus: RirCorpus, out_dir) -> Path:
    """Write mono float32 WAVs plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = corpus.names or [f"rir_{i:04d}.wav" for i in range(len(corpus))]
    entries = []
    for name, pos, rir in zip(names, corpus.receivers, corpus.rirs):
        wavfile.write(out / name, corpus.sample_rate, rir.astype(np.float32))
        entries.append({"receiver": [float(v) for v in pos], "wav": name})
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate": corpus.sample_rate,
        "source": [float(v) for v in corpus.source],
        "room": corpus.room,
        "entries": entries,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype.kind == "f":
        return data.astype(np.float64)
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128) / 128
    return data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)


def resample(signal: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling, Kaiser-windowed, 64 taps per phase."""
    if rate_in == rate_out:
        return np.asarray(signal, dtype=np.float64)
    ratio = Fraction(rate_out, rate_in)
    up, down = ratio.numerator, ratio.denominator
    factor = max(up, down)
    taps = firwin(RESAMPLER_TAPS * factor + 1, 1.0 / factor, window=("kaiser", KAISER_BETA))
    return resample_poly(np.asarray(signal, dtype=np.float64), up, down, window=taps * up)


def fit_length(signal: np.ndarray, length: int = GRID.frame_len) -> np.ndarray:
    out = np.zeros(length)
    n = min(length, len(signal))
    out[:n] = signal[:n]
    return out


def load_corpus(manifest_path, grid: SpectralGrid = GRID) -> RirCorpus:
    """Read a manifest and its WAVs, resampled to the grid rate and trimmed to one frame."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError([f"cannot read manifest {path}: {exc}"]) from exc
    problems = []
    source = np.asarray(manifest.get("source", []), dtype=float)
    if source.shape != (3,):
        problems.append("manifest source must be a 3-vector")
    receivers, rirs, names = [], [], []
    for i, entry in enumerate(manifest.get("entries", [])):
        entry_source = entry.get("source")
        if entry_source is not None and not np.allclose(entry_source, source):
            problems.append(f"entry {i}: source {entry_source} differs from corpus source")
            continue
        wav = path.parent / entry["wav"]
        try:
            rate, data = wavfile.read(wav)
        except FileNotFoundError:
            problems.append(f"entry {i}: missing file {wav}")
            continue
        except ValueError as exc:
            problems.append(f"entry {i}: corrupt WAV {wav}: {exc}")
            continue
        data = _to_float(data)
        if data.ndim > 1:
            data = data[:, 0]
        receivers.append(np.asarray(entry["receiver"], dtype=float))
        rirs.append(fit_length(resample(data, rate, grid.sample_rate), grid.frame_len))
        names.append(entry["wav"])
    if problems:
        raise CorpusError(problems)
    if not rirs:
        raise CorpusError(["manifest has no entries"])
    return RirCorpus(np.array(receivers), np.array(rirs), source, grid.sample_rate, manifest.get("room"), names)


def split(corpus: RirCorpus, ratio: tuple = (9, 1), seed: int = 0):
    """Random train/test split; the first 9/10 of a seeded permutation is training."""
    n = len(corpus)
    if n < 10:
        raise ValueError("need at least 10 RIRs to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratio[0] / sum(ratio)))
    return corpus.subset(np.sort(perm[:n_train])), corpus.subset(np.sort(perm[n_train:]))
