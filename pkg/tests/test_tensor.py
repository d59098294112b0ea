import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from tfm.errors import DimensionError, NonFiniteError
from tfm.tensor import (conv2d, conv2d_backward, conv_output_size, init_uniform, make_rng,
                        matmul, maxpool2d, maxpool2d_backward, spawn_rngs)


def naive_conv(x, k, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_loops(rng, stride, pad):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, k, stride, pad), naive_conv(x, k, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_single_image_shape(rng):
    x = rng.normal(size=(3, 5, 5))
    k = rng.normal(size=(2, 3, 3, 3))
    assert conv2d(x, k, 1, 1).shape == (2, 5, 5)


def test_identity_kernel_copies_input(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(x, k, 1, 1), x)


def test_conv_backward_finite_differences(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=(2, 3, 3, 3))  # 5x5, stride 2, pad 1 -> 3x3
    gx, gk = conv2d_backward(x, k, w, 2, 1)
    f = lambda: float(np.sum(conv2d(x, k, 2, 1) * w))
    assert rel_err(gx, numeric_grad(f, x)) < 1e-6
    assert rel_err(gk, numeric_grad(f, k)) < 1e-6


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        conv_output_size(2, 5, 1, 0)
    with pytest.raises(DimensionError):
        conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_maxpool_and_backward(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    out, arg = maxpool2d(x, 2, 2)
    want = x.reshape(2, 3, 3, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, want)
    g = rng.normal(size=out.shape)
    gx = maxpool2d_backward(g, arg, x.shape, 2, 2)
    f = lambda: float(np.sum(maxpool2d(x, 2, 2)[0] * g))
    assert rel_err(gx, numeric_grad(f, x)) < 1e-6


def test_overlapping_maxpool_gradient_accumulates():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    out, arg = maxpool2d(x, 2, 1)
    assert out.shape == (1, 1, 2, 2) and np.all(out == 5.0)
    gx = maxpool2d_backward(np.ones_like(out), arg, x.shape, 2, 1)
    assert gx[0, 0, 1, 1] == 4.0 and gx.sum() == 4.0


def test_matmul_checks():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(NonFiniteError):
        matmul(np.array([[np.nan]]), np.ones((1, 1)))
    np.testing.assert_array_equal(matmul(np.eye(2), np.arange(4.0).reshape(2, 2)),
                                  np.arange(4.0).reshape(2, 2))


def test_init_uniform_bounds_and_determinism():
    a = init_uniform((200, 50), 50, make_rng(3))
    b = init_uniform((200, 50), 50, make_rng(3))
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32
    assert np.abs(a).max() <= 1 / np.sqrt(50)
    assert np.abs(a).max() > 0.9 / np.sqrt(50)


def test_spawned_rngs_differ_and_repeat():
    a1, b1 = spawn_rngs(5, 2)
    a2, b2 = spawn_rngs(5, 2)
    x, y = a1.random(4), b1.random(4)
    assert not np.array_equal(x, y)
    np.testing.assert_array_equal(x, a2.random(4))
