"""Primitive forward behavior: hand values and shape rules."""

import numpy as np
import pytest

from volpose import ops
from volpose.ops import ShapeMismatch


def test_relu_hand_values():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32).reshape(1, 1, 1, 3)
    out = ops.relu_forward(x)
    np.testing.assert_array_equal(out.ravel(), [0.0, 0.0, 2.0])


def test_l2_loss_identity_is_zero():
    h = np.random.default_rng(0).normal(size=(4, 3, 3, 3)).astype(np.float32)
    assert ops.l2_loss_forward(h, h) == 0.0


def test_conv3d_all_ones_center_voxel():
    # all-ones 3x3x3 volume, all-ones 3x3x3 kernel, same padding:
    # the center voxel sees the full kernel support, so it sums to 27.
    x = np.ones((1, 3, 3, 3), dtype=np.float64)
    w = np.ones((1, 1, 3, 3, 3), dtype=np.float64)
    b = np.zeros(1, dtype=np.float64)
    out = ops.conv3d_forward(x, w, b)
    assert out.shape == (1, 3, 3, 3)
    assert out[0, 1, 1, 1] == 27.0
    # a corner voxel only sees the 2x2x2 overlap
    assert out[0, 0, 0, 0] == 8.0


def test_conv3d_same_padding_preserves_shape():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    out = ops.conv3d_forward(x, w, np.zeros(4))
    assert out.shape == (4, 5, 6, 7)


def test_conv3d_channel_mismatch_rejected():
    x = np.zeros((2, 4, 4, 4))
    w = np.zeros((4, 3, 3, 3, 3))
    with pytest.raises(ShapeMismatch, match="expected 3 input channels, got 2"):
        ops.conv3d_forward(x, w, np.zeros(4))


def test_deconv3d_doubles_extents():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3, 4, 5))
    w = rng.normal(size=(4, 2, 2, 2, 2))
    out = ops.deconv3d_forward(x, w, np.zeros(2))
    assert out.shape == (2, 6, 8, 10)


def test_deconv3d_scatter_positions():
    # single input voxel scatters its value through the 2x2x2 kernel taps
    x = np.zeros((1, 2, 2, 2))
    x[0, 1, 0, 1] = 3.0
    w = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    out = ops.deconv3d_forward(x, w, np.zeros(1))
    for a in range(2):
        for b in range(2):
            for c in range(2):
                assert out[0, 2 + a, 0 + b, 2 + c] == 3.0 * w[0, 0, a, b, c]
    assert out.sum() == 3.0 * w.sum()


def test_max_pool_halves_and_floors_odd():
    x = np.arange(2 * 5 * 4 * 3, dtype=np.float32).reshape(2, 5, 4, 3)
    out = ops.max_pool3d_forward(x)
    assert out.shape == (2, 2, 2, 1)


def test_max_pool_values():
    x = np.zeros((1, 2, 2, 2), dtype=np.float32)
    x[0, 1, 1, 0] = 5.0
    out = ops.max_pool3d_forward(x)
    assert out[0, 0, 0, 0] == 5.0


def test_max_pool_tie_goes_to_lowest_linear_index():
    x = np.full((1, 2, 2, 2), 7.0, dtype=np.float32)
    g = np.ones((1, 1, 1, 1), dtype=np.float32)
    gx = ops.max_pool3d_backward(x, g)
    # all eight window entries tie at 7; the gradient must land on (0,0,0)
    assert gx[0, 0, 0, 0] == 1.0
    assert gx.sum() == 1.0


def test_batch_norm_normalizes_per_channel():
    rng = np.random.default_rng(3)
    x = rng.normal(loc=5.0, scale=3.0, size=(2, 4, 4, 4))
    out = ops.batch_norm_forward(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(1, 2, 3)), 1.0, atol=1e-4)


def test_concat_requires_equal_spatial_extents():
    a = np.zeros((2, 4, 4, 4))
    b = np.zeros((3, 4, 4, 5))
    with pytest.raises(ShapeMismatch, match="spatial extents differ"):
        ops.concat_forward([a, b])
    c = np.zeros((3, 4, 4, 4))
    assert ops.concat_forward([a, c]).shape == (5, 4, 4, 4)


def test_add_shape_mismatch_rejected():
    with pytest.raises(ShapeMismatch):
        ops.add_forward(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)))


def test_primitives_deterministic():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 6, 6)).astype(np.float32)
    w = rng.normal(size=(5, 3, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=5).astype(np.float32)
    a1 = ops.conv3d_forward(x, w, b)
    a2 = ops.conv3d_forward(x, w, b)
    np.testing.assert_array_equal(a1, a2)
