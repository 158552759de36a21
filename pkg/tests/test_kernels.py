import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from finnlite import kernels as K
from finnlite.qtensor import pack_bipolar, pack_rows
import oracles as O


def packed(v):
    return pack_rows((np.asarray(v).reshape(1, -1) > 0).astype(np.uint8))[0]


def test_xnor_examples():
    a = packed([1, -1, 1, -1])
    assert K.xnor_popcount_dot(a, a, 4) == 4
    assert K.xnor_popcount_dot(packed([1, 1]), packed([-1, -1]), 2) == -2


def test_xnor_length_mismatch():
    with pytest.raises(K.LengthMismatch):
        K.xnor_popcount_dot(packed(np.ones(70)), packed(np.ones(10)), 70)


@given(st.integers(1, 300), st.integers(0, 2 ** 32 - 1))
def test_xnor_dot_matches_integer_oracle(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.choice([-1, 1], size=(2, n))
    assert K.xnor_popcount_dot(packed(a), packed(b), n) == O.int_dot(a, b)


@given(st.integers(1, 200), st.integers(1, 9), st.integers(1, 7), st.integers(0, 2 ** 32 - 1))
def test_xnor_gemm_matches_matmul(n, m, k, seed):
    rng = np.random.default_rng(seed)
    a = rng.choice([-1, 1], size=(m, n))
    b = rng.choice([-1, 1], size=(k, n))
    got = K.xnor_popcount_gemm(pack_rows((a > 0).astype(np.uint8)), pack_rows((b > 0).astype(np.uint8)), n)
    assert np.array_equal(got, a @ b.T)


def test_conv_table_shape():
    x = np.zeros((1, 3, 32, 32), dtype=np.int64)
    w = np.ones((64, 3, 3, 3), dtype=np.int64)
    assert K.conv2d(x, w).shape == (1, 64, 30, 30)


def test_conv_identity_kernel(rng):
    x = rng.integers(-5, 5, size=(2, 1, 6, 7))
    assert np.array_equal(K.conv2d(x, np.ones((1, 1, 1, 1), dtype=np.int64)), x)


def test_conv_random_5x5x2_vs_loops(rng):
    x = rng.integers(-8, 8, size=(1, 2, 5, 5))
    w = rng.integers(-2, 2, size=(3, 2, 3, 3))
    assert np.array_equal(K.conv2d(x, w), O.conv2d(x, w).astype(np.int64))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(3, 8), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2 ** 32 - 1))
def test_conv_fast_direct_oracle_agree(n, cin, cout, size, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-8, 8, size=(n, cin, size, size))
    w = rng.integers(-8, 8, size=(cout, cin, k, k))
    want = O.conv2d(x, w, stride, pad).astype(np.int64)
    assert np.array_equal(K.conv2d(x, w, stride, pad), want)
    assert np.array_equal(K.conv2d_direct(x, w, stride, pad), want)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(3, 7), st.integers(1, 2), st.integers(0, 2 ** 32 - 1))
def test_conv_xnor_matches_oracle(cin, cout, size, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.choice([-1, 1], size=(2, cin, size, size))
    w = rng.choice([-1, 1], size=(cout, cin, 3, 3))
    p = pack_bipolar(w)
    assert np.array_equal(K.conv2d_xnor(x, p.words, p.shape, stride), O.conv2d(x, w, stride).astype(np.int64))


def test_conv_channel_mismatch():
    with pytest.raises(K.ShapeMismatch):
        K.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_depthwise_identity_and_stride(rng):
    x = rng.integers(-4, 4, size=(1, 2, 5, 5))
    assert np.array_equal(K.depthwise_conv2d(x, np.ones((2, 1, 1, 1), dtype=np.int64)), x)
    x1 = rng.integers(-4, 4, size=(1, 1, 4, 4))
    w1 = rng.integers(-4, 4, size=(1, 1, 2, 2))
    out = K.depthwise_conv2d(x1, w1, stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out, O.depthwise_conv2d(x1, w1, 2).astype(np.int64))


def test_depthwise_channel_mismatch():
    with pytest.raises(K.ShapeMismatch):
        K.depthwise_conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 1, 3, 3)))


@given(st.integers(1, 4), st.integers(3, 8), st.integers(1, 2), st.integers(0, 1), st.integers(0, 2 ** 32 - 1))
def test_depthwise_paths_agree(c, size, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-8, 8, size=(2, c, size, size))
    w = rng.integers(-8, 8, size=(c, 1, 3, 3))
    want = O.depthwise_conv2d(x, w, stride, pad).astype(np.int64)
    assert np.array_equal(K.depthwise_conv2d(x, w, stride, pad), want)
    assert np.array_equal(K.depthwise_conv2d_direct(x, w, stride, pad), want)


def test_maxpool_examples(rng):
    assert K.maxpool2d(np.array([[[[1, 2], [3, 4]]]])).item() == 4
    assert K.maxpool2d(np.zeros((1, 64, 28, 28))).shape == (1, 64, 14, 14)
    x = rng.normal(size=(2, 3, 6, 6))
    assert np.array_equal(K.maxpool2d(x), O.maxpool2d(x))
    assert np.array_equal(K.maxpool2d_direct(x), O.maxpool2d(x))


def test_avgpool_examples(rng):
    assert np.all(K.avgpool_global(np.full((1, 2, 3, 3), 1.5)) == 1.5)
    assert K.avgpool_global(np.array([[[[1.0, 3.0]]]])).item() == 2.0
    x = rng.normal(size=(2, 4, 5, 5))
    assert np.allclose(K.avgpool_global(x)[:, :, 0, 0], x.mean(axis=(2, 3)), rtol=0, atol=1e-12)
    assert np.array_equal(K.avgpool_global(np.ones((1, 1, 2, 2), dtype=np.int64), "sum"), [[[[4]]]])


def test_fc_examples(rng):
    x = rng.choice([-1, 1], size=(1, 256))
    assert K.fully_connected(x, rng.choice([-1, 1], size=(512, 256))).shape == (1, 512)
    v = rng.integers(-9, 9, size=(3, 5))
    assert np.array_equal(K.fully_connected(v, np.eye(5, dtype=np.int64)), v)
    w = rng.integers(-3, 3, size=(4, 5))
    b = rng.integers(-3, 3, size=4)
    assert np.array_equal(K.fully_connected(v, w, b), O.fully_connected(v, w, b).astype(np.int64))
    assert np.array_equal(K.fully_connected_direct(v, w, b), O.fully_connected(v, w, b).astype(np.int64))


def test_fc_xnor(rng):
    x = rng.choice([-1, 1], size=(4, 130))
    w = rng.choice([-1, 1], size=(7, 130))
    p = pack_bipolar(w)
    assert np.array_equal(K.fully_connected_xnor(x, p.words, 130), x @ w.T)


def test_multithreshold_examples():
    assert K.multithreshold(np.array([[-0.5]]), np.array([[0.0]])).item() == 0
    assert K.multithreshold(np.array([[0.5]]), np.array([[0.0]])).item() == 1
    assert K.multithreshold(np.array([[0.5]]), np.array([[-1.0, 0.0, 1.0]])).item() == 2


def test_multithreshold_rejects_unsorted():
    with pytest.raises(K.ThresholdsNotIncreasing):
        K.multithreshold(np.zeros((1, 1)), np.array([[1.0, 0.0]]))


@given(st.integers(1, 4), st.integers(1, 7), st.sampled_from([1, 2]), st.integers(-3, 3), st.integers(0, 2 ** 32 - 1))
def test_multithreshold_vs_count_loop(c, nthr, out_scale, out_offset, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-20, 20, size=(2, c, 3, 3))
    t = np.sort(rng.integers(-20, 20, size=(c, nthr)), axis=1)
    assert np.array_equal(K.multithreshold(x, t, out_scale, out_offset), O.multithreshold(x, t, out_scale, out_offset))


def test_quant_activation_modes():
    x = np.array([-2.0, -0.3, 0.0, 0.24, 0.25, 0.9, 3.0])
    assert K.quant_levels(x, 1, "bipolar", 1.0).tolist() == [-1, -1, 1, 1, 1, 1, 1]
    assert K.quant_levels(x, 2, "signed", 0.5).tolist() == [-2, -1, 0, 0, 1, 1, 1]
    assert K.quant_levels(x, 4, "unsigned", 1 / 16).tolist() == [0, 0, 0, 4, 4, 14, 15]


def test_bn_affine_formula(rng):
    g, b, m, v = rng.uniform(0.5, 1.5, 4), rng.normal(size=4), rng.normal(size=4), rng.uniform(0.5, 2, 4)
    s, t = K.bn_affine(g, b, m, v, 1e-4)
    x = rng.normal(size=(3, 4))
    ref = g * (x - m) / np.sqrt(v + 1e-4) + b
    assert np.allclose(x * s + t, ref, rtol=1e-12, atol=1e-12)
