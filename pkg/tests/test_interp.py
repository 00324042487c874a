import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerpipe.graph import FixedPointFormat, KernelSpec, Node, OpKind, TensorShape
from layerpipe.interp import (
    conv2d_ref,
    depthwise_conv2d_ref,
    dequantize,
    eval_graph,
    fixed_mean,
    maxpool_ref,
    quantize,
    requantize,
)

from conftest import conv, make_graph, placeholder

Q88 = FixedPointFormat(16, 8)


def test_quantize_examples():
    assert quantize(0.0, FixedPointFormat(8, 3)) == 0
    assert quantize(5.0, Q88) == 1280 == 0x0500
    assert quantize(1000.0, FixedPointFormat(8, 4)) == 127
    assert quantize(-1000.0, FixedPointFormat(8, 4)) == -128


def test_rounding_is_half_away_from_zero():
    f = FixedPointFormat(16, 0)
    assert quantize([0.5, 1.5, -0.5, -1.5, 2.4999], f).tolist() == [1, 2, -1, -2, 2]


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.integers(2, 24), st.integers(0, 12))
def test_quantize_error_bounded(xs, bits, frac):
    frac = min(frac, bits - 1)
    f = FixedPointFormat(bits, frac)
    x = np.array(xs)
    q = quantize(x, f)
    assert np.all((q >= f.min_int) & (q <= f.max_int))
    inside = (x >= dequantize(f.min_int, f)) & (x <= dequantize(f.max_int, f))
    assert np.all(np.abs(dequantize(q, f) - x)[inside] <= f.resolution / 2 + 1e-12)


@given(st.lists(st.integers(-2**20, 2**20), min_size=1, max_size=10), st.integers(0, 12))
def test_requantize_matches_rounded_division(vals, shift):
    acc = np.array(vals, np.int64)
    out = requantize(acc, 8 + shift, FixedPointFormat(32, 8))
    expect = np.sign(acc) * np.floor(np.abs(acc) / 2.0 ** shift + 0.5)
    np.testing.assert_array_equal(out, expect)


def test_conv_ones_kernel():
    x = np.array([[1, 2], [3, 4]], float).reshape(2, 2, 1)
    out = conv2d_ref(x, np.ones((2, 2, 1, 1)), KernelSpec(2, 2))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 10


def test_conv_zero_and_identity(rng):
    x = rng.normal(size=(5, 4, 1))
    assert not conv2d_ref(x, np.zeros((3, 3, 1, 2)), KernelSpec(3, 3, pt=1, pb=1, pl=1, pr=1)).any()
    np.testing.assert_array_equal(conv2d_ref(x, np.ones((1, 1, 1, 1)), KernelSpec()), x)


def test_conv_matches_brute_force(rng):
    x = rng.normal(size=(7, 6, 3))
    w = rng.normal(size=(3, 2, 3, 4))
    spec = KernelSpec(3, 2, 2, 1, 1, 0, 0, 1)
    out = conv2d_ref(x, w, spec)
    xp = np.pad(x, ((1, 0), (0, 1), (0, 0)))
    for oy in range(out.shape[0]):
        for ox in range(out.shape[1]):
            win = xp[oy * 2:oy * 2 + 3, ox:ox + 2, :]
            np.testing.assert_allclose(out[oy, ox], np.einsum("yxi,yxio->o", win, w), rtol=1e-12)


def test_depthwise_identity_and_single_channel(rng):
    x = rng.normal(size=(4, 4, 3))
    np.testing.assert_array_equal(depthwise_conv2d_ref(x, np.ones((1, 1, 3, 1)), KernelSpec()), x)
    x1 = rng.normal(size=(5, 5, 1))
    w1 = rng.normal(size=(3, 3, 1, 1))
    spec = KernelSpec(3, 3, 1, 1, 1, 1, 1, 1)
    np.testing.assert_allclose(depthwise_conv2d_ref(x1, w1, spec), conv2d_ref(x1, w1, spec))


def test_depthwise_matches_per_channel_conv(rng):
    x = rng.normal(size=(6, 6, 4))
    w = rng.normal(size=(3, 3, 4, 1))
    spec = KernelSpec(3, 3, 2, 2, 1, 1, 1, 1)
    out = depthwise_conv2d_ref(x, w, spec)
    for c in range(4):
        ref = conv2d_ref(x[:, :, c:c + 1], w[:, :, c:c + 1, :], spec)
        np.testing.assert_allclose(out[:, :, c:c + 1], ref, rtol=1e-12)


def test_maxpool_pads_with_given_value():
    x = -np.ones((2, 2, 1))
    out = maxpool_ref(x, KernelSpec(3, 3, 1, 1, 1, 1, 1, 1), pad_value=-np.inf)
    assert (out == -1).all()


def test_relu_and_mean():
    g = make_graph([placeholder(1, 2, 1), Node("r", OpKind.RELU, ("x",))])
    assert eval_graph(g, np.array([-1.0, 2.0]).reshape(1, 2, 1))["r"].ravel().tolist() == [0, 2]
    g = make_graph([placeholder(2, 2, 1), Node("m", OpKind.MEAN, ("x",))])
    assert eval_graph(g, np.array([[1.0, 2], [3, 4]]).reshape(2, 2, 1))["m"].item() == 2.5


def test_fixed_mean_rounds():
    # 10 / 4 = 2.5 -> 3 (half away), -10 / 4 -> -3
    assert fixed_mean(np.array([10, -10]), 4, FixedPointFormat(16, 0), FixedPointFormat(16, 0)).tolist() == [3, -3]


def test_fixed_conv_bias_close_to_float(rng):
    w = rng.normal(0, 0.3, size=(3, 3, 4, 5))
    nodes = [placeholder(6, 6, 4), conv("c", "x", w, pad=1), Node("b", OpKind.BIAS_ADD, ("c",), bias=rng.normal(size=5))]
    g = make_graph(nodes)
    x = rng.uniform(-1, 1, size=(6, 6, 4))
    fl = eval_graph(g, x)["b"]
    fx = dequantize(eval_graph(g, x, "fixed")["b"], Q88)
    acc_len = 3 * 3 * 4
    assert np.max(np.abs(fl - fx)) <= 2.0 ** -8 * acc_len


def test_fixed_relu6_clips():
    g = make_graph([placeholder(1, 3, 1), Node("r", OpKind.RELU6, ("x",))])
    out = eval_graph(g, np.array([-2.0, 3.0, 9.0]).reshape(1, 3, 1), "fixed")["r"].ravel()
    assert out.tolist() == [0, 3 * 256, 6 * 256]


def test_unknown_mode():
    g = make_graph([placeholder(), Node("r", OpKind.RELU, ("x",))])
    with pytest.raises(ValueError):
        eval_graph(g, np.zeros((6, 6, 3)), "double")
