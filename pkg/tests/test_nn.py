import numpy as np
import pytest

from pfskd import oracles
from pfskd.nn import Conv2dLayer, bilinear_matrix, conv2d, conv2d_raw, init_params, upsample_bilinear


def test_identity_1x1():
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    out = conv2d_raw(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


def test_box_sum_3x3():
    out = conv2d_raw(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
    assert out[0, 0, 2, 2] == 9 and out[0, 0, 0, 0] == 4 and out[0, 0, 0, 2] == 6


@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 2), (2, 1), (1, 4), (2, 2)])
def test_conv_against_loop_oracle(rng, stride, dilation):
    x = rng.standard_normal((2, 3, 7, 6))
    w, b = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    pad = dilation
    ref = oracles.conv2d_loop(x, w, b, stride, dilation, pad)
    np.testing.assert_allclose(conv2d_raw(x, w, b, stride, dilation, pad), ref, rtol=0, atol=1e-12)


def test_same_padding_keeps_size(rng):
    layer = Conv2dLayer(rng.standard_normal((2, 3, 3, 3)), np.zeros(2), dilation=4)
    assert layer.padding == 4
    assert conv2d(rng.standard_normal((1, 3, 12, 12)), layer).shape == (1, 2, 12, 12)


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ValueError):
        conv2d_raw(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)), np.zeros(1), padding=1)


def test_upsample_constant_and_single_pixel():
    c = np.full((1, 2, 3, 3), 0.7)
    np.testing.assert_allclose(upsample_bilinear(c, 9, 6), 0.7)
    one = np.array([[[[2.5]]]])
    assert np.array_equal(upsample_bilinear(one, 4, 5), np.full((1, 1, 4, 5), 2.5))


def test_upsample_2x2_hand_weights():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    # half-pixel centres: output coords map to -0.25, 0.25, 0.75, 1.25, clamped at the borders
    a = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    np.testing.assert_allclose(bilinear_matrix(4, 2), a)
    np.testing.assert_allclose(upsample_bilinear(x, 4, 4)[0, 0], a @ x[0, 0] @ a.T)
    np.testing.assert_allclose(upsample_bilinear(x, 4, 4), oracles.bilinear_loop(x, 4, 4), atol=1e-12)


def test_upsample_rejects_shrinking():
    with pytest.raises(ValueError):
        upsample_bilinear(np.zeros((1, 1, 4, 4)), 2, 4)


def test_init_params_bounds_and_determinism():
    def make(seed):
        layer = Conv2dLayer.create(3, 8, 3)
        init_params(layer, np.random.default_rng(seed))
        return layer
    a, b, c = make(0), make(0), make(1)
    assert np.array_equal(a.weight, b.weight)
    assert not np.array_equal(a.weight, c.weight)
    assert np.abs(a.weight).max() <= np.sqrt(6 / 27)
    assert not a.bias.any()
