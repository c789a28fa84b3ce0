import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nams.spherical import (
    R_MIN,
    ShIndex,
    fibonacci_sphere,
    n_channels,
    random_rotation,
    real_sph_harm,
    sh_basis,
    sh_basis_angles,
    to_angular,
)

coord = st.floats(-20, 20, allow_nan=False)
vec3 = st.tuples(coord, coord, coord).map(np.array)


def quadrature(n_theta=16, n_phi=32):
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    weights = np.outer(w, np.full(n_phi, 2 * np.pi / n_phi))
    return tt.ravel(), pp.ravel(), weights.ravel()


def random_directions(count, seed):
    v = np.random.default_rng(seed).standard_normal((count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_flat_index_bijection():
    seen = set()
    for n in range(4):
        for m in range(-n, n + 1):
            idx = ShIndex(n, m)
            assert ShIndex.from_flat(idx.flat) == idx
            seen.add(idx.flat)
    assert seen == set(range(16))
    assert n_channels(3) == 16


def test_invalid_index_rejected():
    with pytest.raises(ValueError):
        ShIndex(1, 2)


def test_closed_form_values():
    assert abs(real_sph_harm(ShIndex(0, 0), 0.3, 1.1) - 0.2820948) < 1e-7
    assert abs(real_sph_harm(ShIndex(0, 0), 0.3, 1.1) - 1 / (2 * math.sqrt(math.pi))) < 1e-15
    assert abs(real_sph_harm(ShIndex(1, 0), 0.0, 0.0) - math.sqrt(3 / (4 * math.pi))) < 1e-15


def test_no_condon_shortley_phase():
    # Y_1^1 points along +x and Y_1^-1 along +y
    c = math.sqrt(3 / (4 * math.pi))
    assert abs(real_sph_harm(ShIndex(1, 1), math.pi / 2, 0.0) - c) < 1e-15
    assert abs(real_sph_harm(ShIndex(1, -1), math.pi / 2, math.pi / 2) - c) < 1e-15


def test_quadrature_orthonormality_angles():
    theta, phi, w = quadrature()
    Y = sh_basis_angles(3, theta, phi)
    gram = (Y * w[:, None]).T @ Y
    assert np.max(np.abs(gram - np.eye(16))) < 1e-10


def test_quadrature_orthonormality_cartesian():
    theta, phi, w = quadrature()
    dirs = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    Y = sh_basis(3, dirs)
    gram = (Y * w[:, None]).T @ Y
    assert np.max(np.abs(gram - np.eye(16))) < 1e-10


def test_cartesian_matches_angle_form():
    d = random_directions(200, 0)
    ang = to_angular(d, np.zeros(3), r_min=0.0)
    np.testing.assert_allclose(sh_basis(3, d), sh_basis_angles(3, ang.theta, ang.phi), atol=1e-13)


def test_addition_theorem():
    Y = sh_basis(3, random_directions(100, 1))
    for n in range(4):
        block = Y[:, n * n:(n + 1) ** 2]
        np.testing.assert_allclose(np.sum(block**2, axis=1), (2 * n + 1) / (4 * math.pi), atol=1e-10)


def test_to_angular_axes():
    up = to_angular(np.array([0.0, 0, 1]), np.zeros(3))
    assert up.r == 1 and up.theta == 0
    side = to_angular(np.array([1.0, 0, 0]), np.zeros(3))
    assert side.r == 1 and abs(side.theta - math.pi / 2) < 1e-15 and side.phi == 0


def test_to_angular_negative_x_azimuth_in_range():
    a = to_angular(np.array([-1.0, 0, 0]), np.zeros(3))
    assert -math.pi <= a.phi < math.pi


def test_to_angular_clamps_distance():
    a = to_angular(np.array([0.0, 0, 0.01]), np.zeros(3))
    assert a.r == R_MIN
    assert a.theta == 0


@settings(max_examples=50, deadline=None)
@given(vec3, vec3)
def test_to_angular_roundtrip(p, r):
    diff = p - r
    dist = np.linalg.norm(diff)
    if dist < 1e-3:
        return
    a = to_angular(p, r, r_min=0.0)
    assert abs(a.r - dist) <= 1e-12 * max(1.0, dist)
    np.testing.assert_allclose(a.unit_vector(), diff / dist, atol=1e-12)
    assert 0 <= a.theta <= math.pi and -math.pi <= a.phi < math.pi
    assert to_angular(r, p).r == to_angular(p, r).r


def test_fibonacci_unit_norm_and_coverage():
    pts = fibonacci_sphere(32)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    assert np.linalg.norm(pts.mean(axis=0)) < 0.05


def test_fibonacci_two_points():
    np.testing.assert_allclose(fibonacci_sphere(2)[:, 2], [0.5, -0.5])


def test_fibonacci_rejects_zero():
    with pytest.raises(ValueError):
        fibonacci_sphere(0)


def test_rotation_orthogonal():
    rng = np.random.default_rng(5)
    for _ in range(20):
        R = random_rotation(rng)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12


def test_rotation_uniformity():
    rng = np.random.default_rng(6)
    zaxis = np.array([random_rotation(rng)[:, 2] for _ in range(100_000)])
    assert np.linalg.norm(zaxis.mean(axis=0)) < 0.02
