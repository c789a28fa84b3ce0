"""Two-branch multipole network: pole positions, signal head, directivity head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .renderer import SPEED_OF_SOUND, audible_poles, render_spectrum
from .spectral import GRID
from .spherical import fibonacci_sphere, n_channels, random_rotation

N_FREQS = 10
ENCODING_DIM = 3 * 2 * N_FREQS
HIDDEN = 512
SIGNAL_LEN = 72  # 3 ms at 24 kHz
N_SPHERES = 34
DENSE_PER_SPHERE = 32


def positional_encode(x, scale: float):
    """sin/cos of 2^k * pi * (x/scale) for k = 0..9, per coordinate -> [..., 60]."""
    if scale <= 0:
        raise ValueError("encoding scale must be positive")
    freqs = (2.0 ** np.arange(N_FREQS)) * math.pi
    xv = ad.value_of(x)
    lead = xv.shape[:-1]
    arg = ad.reshape(x, lead + (3, 1)) * (freqs / scale)
    pair = ad.stack([ad.sin(arg), ad.cos(arg)], axis=-1)
    return ad.reshape(pair, lead + (ENCODING_DIM,))


def sphere_layout(source, per_sphere: int, rng: np.random.Generator) -> np.ndarray:
    """Source pole followed by ``per_sphere`` Fibonacci points on radii 1..34 m."""
    source = np.asarray(source, dtype=np.float64)
    if per_sphere < 1:
        raise ValueError("per_sphere must be >= 1")
    base = fibonacci_sphere(per_sphere)
    shells = [source[None, :]]
    for radius in range(1, N_SPHERES + 1):
        rot = random_rotation(rng)
        shells.append(source + radius * base @ rot.T)
    return np.concatenate(shells, axis=0)


@dataclass
class MultipoleSet:
    """Alive pole positions plus their indices into the initial layout."""

    positions: ad.Tensor
    ids: np.ndarray
    total: int
    source: np.ndarray

    @property
    def alive(self) -> np.ndarray:
        mask = np.zeros(self.total, dtype=bool)
        mask[self.ids] = True
        return mask

    @property
    def count(self) -> int:
        return len(self.ids)


def init_dense(source, rng: np.random.Generator) -> np.ndarray:
    return sphere_layout(source, DENSE_PER_SPHERE, rng)


def init_sparse(source, per_sphere: int, rng: np.random.Generator) -> np.ndarray:
    return sphere_layout(source, per_sphere, rng)


@dataclass
class ModelConfig:
    sh_order: int = 3
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    hidden: int = HIDDEN
    signal_len: int = SIGNAL_LEN
    speed_of_sound: float = SPEED_OF_SOUND
    final_gain: float = 0.1

    @property
    def channels(self) -> int:
        return n_channels(self.sh_order)


def _init_linear(store: ad.ParamStore, prefix: str, sizes, rng, final_gain: float) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        if i == len(sizes) - 2:
            w *= final_gain
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", b)


def mlp(store: ad.ParamStore, prefix: str, x, layers: int = 3):
    h = x
    for i in range(layers):
        h = ad.affine(h, store[f"{prefix}.w{i}"], store[f"{prefix}.b{i}"])
        if i < layers - 1:
            h = ad.relu(h)
    return h


@dataclass
class NamsModel:
    config: ModelConfig
    store: ad.ParamStore
    poles: MultipoleSet
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, positions, source, config: ModelConfig, rng: np.random.Generator) -> "NamsModel":
        store = ad.ParamStore()
        pos = store.add("poles", positions)
        h = config.hidden
        _init_linear(store, "sig", [ENCODING_DIM, h, h, config.signal_len], rng, config.final_gain)
        _init_linear(
            store,
            "dir",
            [2 * ENCODING_DIM, h, h, config.channels * config.signal_len],
            rng,
            config.final_gain,
        )
        poles = MultipoleSet(pos, np.arange(len(positions)), len(positions), np.asarray(source, float))
        return cls(config, store, poles)

    # ---------------------------------------------------------------- heads

    def encode_absolute(self, positions):
        return positional_encode(positions - np.asarray(self.config.center)[None, :], self.config.scale)

    def signal_head(self, index=None):
        """Emitted signals [P, 72] from pole positions alone."""
        pos = self.poles.positions if index is None else self.poles.positions[index]
        return mlp(self.store, "sig", self.encode_absolute(pos))

    def directivity_head(self, receiver, index=None):
        """Harmonic coefficients [P, C, 72] of each pole toward ``receiver``."""
        receiver = np.asarray(receiver, dtype=np.float64)
        pos = self.poles.positions if index is None else self.poles.positions[index]
        rel = positional_encode(pos - receiver[None, :], self.config.scale)
        feats = ad.concat([rel, self.encode_absolute(pos)], axis=-1)
        out = mlp(self.store, "dir", feats)
        p = ad.value_of(out).shape[0]
        return ad.reshape(out, (p, self.config.channels, self.config.signal_len))

    # ---------------------------------------------------------------- rendering

    def render_spectrum(self, receiver, signals=None):
        """One-sided RIR spectrum at ``receiver``.

        ``signals`` may carry precomputed emitted signals for all alive poles
        (shared across the receivers of a minibatch).
        """
        receiver = np.asarray(receiver, dtype=np.float64)
        idx = audible_poles(self.poles.positions.value, receiver, GRID, self.config.speed_of_sound)
        if len(idx) == 0:
            raise ValueError("no pole within range of the receiver")
        full = len(idx) == self.poles.count
        sel = None if full else idx
        pos = self.poles.positions if full else self.poles.positions[idx]
        if signals is None:
            sig = self.signal_head(sel)
        else:
            sig = signals if full else signals[idx]
        coeffs = self.directivity_head(receiver, sel)
        return render_spectrum(
            pos, sig, coeffs, receiver, self.config.sh_order, GRID, self.config.speed_of_sound
        )

    def render(self, receiver, signals=None):
        return ad.idft(self.render_spectrum(receiver, signals), GRID.frame_len)

    def render_numpy(self, receiver) -> np.ndarray:
        out = self.render(receiver)
        return np.asarray(ad.value_of(out))

    def pole_energies(self) -> np.ndarray:
        """Energy of each alive pole's emitted signal.

        The signal branch has no receiver input, so no dummy receiver is needed.
        """
        s = ad.value_of(self.signal_head())
        return np.sum(s * s, axis=1)

    def remove_poles(self, local_indices) -> np.ndarray:
        """Drop alive poles by their row index; returns their initial-layout ids."""
        keep = np.ones(self.poles.count, dtype=bool)
        keep[np.asarray(local_indices, dtype=int)] = False
        removed = self.poles.ids[~keep]
        self.store.select_rows("poles", keep)
        self.poles.ids = self.poles.ids[keep]
        return removed

    def num_parameters(self) -> int:
        return self.store.num_values()
