"""Real spherical harmonics, receiver-relative angles and sphere sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import lpmv

R_MIN = 0.1
MAX_ORDER = 3
GOLDEN_RATIO = (1 + math.sqrt(5)) / 2


@dataclass(frozen=True)
class ShIndex:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise ValueError(f"invalid harmonic index n={self.n}, m={self.m}")

    @property
    def flat(self) -> int:
        return self.n * self.n + self.n + self.m

    @classmethod
    def from_flat(cls, flat: int) -> "ShIndex":
        n = math.isqrt(flat)
        return cls(n, flat - n * n - n)


def n_channels(order: int) -> int:
    return (order + 1) ** 2


@dataclass(frozen=True)
class AngularPosition:
    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    def unit_vector(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.stack([st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)], axis=-1)


def _norm_const(n: int, m: int) -> float:
    return math.sqrt((2 * n + 1) * math.factorial(n - m) / (4 * math.pi * math.factorial(n + m)))


def real_sph_harm(idx: ShIndex, theta, phi) -> np.ndarray:
    """Orthonormal real harmonic Y_n^m(theta, phi) without the Condon-Shortley phase."""
    n, m = idx.n, idx.m
    am = abs(m)
    x = np.cos(np.asarray(theta, dtype=np.float64))
    # scipy's lpmv carries (-1)^m; undo it
    legendre = (-1) ** am * lpmv(am, n, x)
    k = _norm_const(n, am)
    phi = np.asarray(phi, dtype=np.float64)
    if m > 0:
        return math.sqrt(2) * k * np.cos(m * phi) * legendre
    if m < 0:
        return math.sqrt(2) * k * np.sin(am * phi) * legendre
    return k * legendre * np.ones_like(phi)


def sh_basis_angles(order: int, theta, phi) -> np.ndarray:
    """All harmonics up to ``order`` stacked on a trailing flat-index axis."""
    return np.stack(
        [real_sph_harm(ShIndex.from_flat(f), theta, phi) for f in range(n_channels(order))],
        axis=-1,
    )


def sh_cartesian(order: int, x, y, z) -> list:
    """Harmonics as polynomials of a unit direction (x, y, z).

    Works on plain arrays and on autodiff tensors alike, which is how the
    renderer differentiates the angular pattern with respect to pole position.
    Returned in flat-index order.
    """
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"harmonic order must be in 0..{MAX_ORDER}")
    pi = math.pi
    out = [0.5 * math.sqrt(1 / pi) + 0 * x]
    if order >= 1:
        c1 = math.sqrt(3 / (4 * pi))
        out += [c1 * y, c1 * z, c1 * x]
    if order >= 2:
        c2 = 0.5 * math.sqrt(15 / pi)
        out += [
            c2 * (x * y),
            c2 * (y * z),
            0.25 * math.sqrt(5 / pi) * (3 * (z * z) - 1),
            c2 * (x * z),
            0.5 * c2 * (x * x - y * y),
        ]
    if order >= 3:
        a = 0.25 * math.sqrt(35 / (2 * pi))
        b = 0.5 * math.sqrt(105 / pi)
        c = 0.25 * math.sqrt(21 / (2 * pi))
        zz = z * z
        out += [
            a * (y * (3 * (x * x) - y * y)),
            b * (x * y * z),
            c * (y * (5 * zz - 1)),
            0.25 * math.sqrt(7 / pi) * (z * (5 * zz - 3)),
            c * (x * (5 * zz - 1)),
            0.5 * b * (z * (x * x - y * y)),
            a * (x * (x * x - 3 * (y * y))),
        ]
    return out


def sh_basis(order: int, directions) -> np.ndarray:
    """Harmonics for an array of unit vectors [..., 3] -> [..., (order+1)^2]."""
    d = np.asarray(directions, dtype=np.float64)
    return np.stack(sh_cartesian(order, d[..., 0], d[..., 1], d[..., 2]), axis=-1)


def to_angular(x_p, x_r, r_min: float = R_MIN) -> AngularPosition:
    """Direction of the pole as seen from the receiver, with the distance clamped at r_min."""
    v = np.asarray(x_p, dtype=np.float64) - np.asarray(x_r, dtype=np.float64)
    r = np.linalg.norm(v, axis=-1)
    theta = np.arccos(np.clip(v[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    phi = np.arctan2(v[..., 1], v[..., 0])
    # atan2 returns pi for the negative x-axis; keep azimuth in [-pi, pi)
    phi = np.where(phi >= np.pi, phi - 2 * np.pi, phi)
    return AngularPosition(np.maximum(r, r_min), theta, phi)


def fibonacci_sphere(count: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    i = np.arange(count)
    z = 1 - (2 * i + 1) / count
    azimuth = 2 * np.pi * i * (1 - 1 / GOLDEN_RATIO)
    rho = np.sqrt(1 - z * z)
    return np.stack([rho * np.cos(azimuth), rho * np.sin(azimuth), z], axis=-1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
