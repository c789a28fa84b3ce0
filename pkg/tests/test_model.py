import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nams import autodiff as ad
from nams.model import (
    ENCODING_DIM,
    ModelConfig,
    NamsModel,
    init_dense,
    init_sparse,
    positional_encode,
    sphere_layout,
)

SOURCE = np.array([1.5, 1.0, 1.4])


def encode(x, scale):
    return ad.value_of(positional_encode(x, scale))


def small_model(positions=None, sh_order=3, hidden=16, seed=0, final_gain=0.1):
    rng = np.random.default_rng(seed)
    default = init_sparse(SOURCE, 1, rng)[:6]
    positions = default if positions is None else positions
    cfg = ModelConfig(sh_order=sh_order, center=(3.0, 2.0, 1.5), scale=3.9, hidden=hidden, final_gain=final_gain)
    return NamsModel.create(positions, SOURCE, cfg, rng)


# positional encoding ---------------------------------------------------------------


def test_encoding_at_origin():
    e = encode(np.zeros(3), 2.0)
    assert e.shape == (60,)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_encoding_matches_direct_formula():
    x = np.array([0.3, -1.2, 2.5])
    scale = 3.0
    expected = []
    for c in x / scale:
        for k in range(10):
            expected += [np.sin(2**k * np.pi * c), np.cos(2**k * np.pi * c)]
    np.testing.assert_allclose(encode(x, scale), expected, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.floats(0.5, 10),
    st.integers(0, 2),
)
def test_encoding_period_two_scales(x, scale, axis):
    x = np.array(x)
    y = x.copy()
    y[axis] += 2 * scale
    ex, ey = encode(x, scale), encode(y, scale)
    assert ex.shape == (ENCODING_DIM,)
    k0 = slice(axis * 20, axis * 20 + 2)
    np.testing.assert_allclose(ex[k0], ey[k0], atol=1e-9)


def test_encoding_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        positional_encode(np.zeros(3), 0.0)


def test_encoding_batched():
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = encode(x, 2.0)
    assert out.shape == (5, 60)
    np.testing.assert_allclose(out[3], encode(x[3], 2.0), atol=1e-15)


# initial layouts -------------------------------------------------------------------


def test_dense_layout():
    pos = init_dense(SOURCE, np.random.default_rng(0))
    assert pos.shape == (1089, 3)
    dist = np.linalg.norm(pos - SOURCE, axis=1)
    assert np.sum(dist < 1e-9) == 1
    for r in range(1, 35):
        assert np.sum(np.abs(dist - r) < 1e-9) == 32
    assert dist.max() / 343 < 0.1
    assert abs(dist.max() / 343 - 0.09913) < 1e-5


@pytest.mark.parametrize("per_sphere, count", [(8, 273), (9, 307), (1, 35)])
def test_sparse_counts(per_sphere, count):
    assert init_sparse(SOURCE, per_sphere, np.random.default_rng(0)).shape == (count, 3)


def test_sparse_32_equals_dense():
    a = init_sparse(SOURCE, 32, np.random.default_rng(4))
    b = init_dense(SOURCE, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_sparse_rejects_zero():
    with pytest.raises(ValueError):
        sphere_layout(SOURCE, 0, np.random.default_rng(0))


def test_each_sphere_rotated_differently():
    pos = init_dense(np.zeros(3), np.random.default_rng(0))
    first = pos[1:33] / 1.0
    second = pos[33:65] / 2.0
    assert not np.allclose(first, second)


# heads -------------------------------------------------------------------------------


def test_parameter_shapes():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(center=(3.0, 2.0, 1.5), scale=3.9)
    model = NamsModel.create(init_sparse(SOURCE, 1, rng), SOURCE, cfg, rng)
    s = model.store
    assert s["sig.w0"].value.shape == (60, 512)
    assert s["sig.w1"].value.shape == (512, 512)
    assert s["sig.w2"].value.shape == (512, 72)
    assert s["dir.w0"].value.shape == (120, 512)
    assert s["dir.w2"].value.shape == (512, 16 * 72)
    assert s["dir.b2"].value.shape == (1152,)


def test_head_output_shapes():
    model = small_model()
    assert model.signal_head().shape == (6, 72)
    assert model.directivity_head(np.array([2.0, 2.0, 1.0])).shape == (6, 16, 72)
    assert small_model(sh_order=0).directivity_head(np.ones(3)).shape == (6, 1, 72)


def test_signal_head_has_no_receiver_input():
    model = small_model()
    a = model.signal_head()
    model.directivity_head(np.array([0.5, 0.5, 0.5]))
    b = model.signal_head()
    np.testing.assert_array_equal(a.value, b.value)
    with pytest.raises(TypeError):
        model.signal_head(np.arange(6), np.ones(3))


def test_zero_final_layer_gives_bias():
    model = small_model()
    model.store["sig.w2"].value[:] = 0.0
    out = model.signal_head().value
    np.testing.assert_array_equal(out, np.broadcast_to(model.store["sig.b2"].value, out.shape))


def test_directivity_relative_part_translation_invariant():
    model = small_model()
    rec = np.array([2.0, 1.0, 0.5])
    offset = np.array([0.37, -0.2, 0.9])
    pos = model.poles.positions.value
    rel_a = encode(pos - rec, model.config.scale)
    rel_b = encode((pos + offset) - (rec + offset), model.config.scale)
    np.testing.assert_allclose(rel_a, rel_b, atol=1e-12)
    # the absolute half does change, so the head output changes too
    moved = small_model(positions=pos + offset)
    assert not np.allclose(model.directivity_head(rec).value, moved.directivity_head(rec + offset).value)


def test_head_outputs_finite():
    model = small_model()
    assert np.all(np.isfinite(model.signal_head().value))
    assert np.all(np.isfinite(model.directivity_head(np.ones(3)).value))


def test_subset_index_matches_full():
    model = small_model()
    idx = np.array([4, 1])
    np.testing.assert_allclose(model.signal_head(idx).value, model.signal_head().value[idx], atol=1e-14)
    rec = np.array([1.0, 2.0, 0.4])
    np.testing.assert_allclose(
        model.directivity_head(rec, idx).value, model.directivity_head(rec).value[idx], atol=1e-14
    )


# pole bookkeeping ---------------------------------------------------------------------


def test_remove_poles_tracks_ids():
    model = small_model()
    removed = model.remove_poles([1, 3])
    assert removed.tolist() == [1, 3]
    assert model.poles.count == 4
    assert model.poles.ids.tolist() == [0, 2, 4, 5]
    assert model.poles.alive.tolist() == [True, False, True, False, True, True]
    assert model.signal_head().shape == (4, 72)
    removed = model.remove_poles([0])
    assert removed.tolist() == [0]
    assert model.poles.ids.tolist() == [2, 4, 5]


def test_dead_poles_are_not_rendered():
    model = small_model()
    rec = np.array([2.5, 1.5, 1.0])
    kept = np.array([0, 2, 4, 5])
    full = model.render_numpy(rec)
    fresh = small_model(positions=model.poles.positions.value[kept].copy())
    model.remove_poles([1, 3])
    assert model.poles.positions.value.shape == (4, 3)
    np.testing.assert_array_equal(model.render_numpy(rec), fresh.render_numpy(rec))
    assert not np.allclose(full, fresh.render_numpy(rec))


def test_far_poles_are_excluded():
    pos = np.array([SOURCE, SOURCE + [40.0, 0, 0]])
    model = small_model(positions=pos)
    rec = SOURCE + [1.0, 0, 0]
    near = small_model(positions=pos[:1])
    # same seeds give the same heads; only the far pole differs
    np.testing.assert_allclose(model.render_numpy(rec), near.render_numpy(rec), atol=1e-15)


def test_parameter_count_full_size():
    rng = np.random.default_rng(0)
    model = NamsModel.create(init_dense(SOURCE, rng), SOURCE, ModelConfig(scale=3.9), rng)
    sig = 60 * 512 + 512 + 512 * 512 + 512 + 512 * 72 + 72
    dirh = 120 * 512 + 512 + 512 * 512 + 512 + 512 * 1152 + 1152
    assert model.num_parameters() == sig + dirh + 1089 * 3


def test_pole_position_gradient_matches_fine_differences():
    # pole coordinates feed 10-octave sinusoids into ReLU layers, so the
    # difference step must stay well below the kink spacing
    from nams.losses import LossWeights, total_loss
    from nams.trainer import accumulate_gradients

    rng = np.random.default_rng(3)
    pos = SOURCE + np.array([[0.0, 0.0, 0.0], [0.8, 0.3, -0.2], [-0.5, 1.1, 0.4]])
    model = small_model(positions=pos, hidden=64)
    receivers = np.array([[4.0, 2.5, 1.2], [2.2, 3.1, 0.9]])
    targets = 0.05 * rng.standard_normal((2, 2400)) * np.exp(-np.arange(2400) / 300)
    weights = LossWeights()
    accumulate_gradients(model, receivers, targets, weights)
    analytic = model.store["poles"].grad.copy()
    model.store.zero_grad()

    def loss():
        s = model.signal_head()
        return np.mean([total_loss(model.render(r, s), t, weights).value for r, t in zip(receivers, targets)])

    v = model.store["poles"].value
    h = 1e-7
    fd = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        orig = v[idx]
        v[idx] = orig + h
        up = loss()
        v[idx] = orig - h
        down = loss()
        v[idx] = orig
        fd[idx] = (up - down) / (2 * h)
    assert np.linalg.norm(fd - analytic) / np.linalg.norm(analytic) < 1e-5
