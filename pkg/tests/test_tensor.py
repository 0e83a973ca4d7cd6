import numpy as np
import pytest

from oracles import naive_conv, naive_maxpool
from sleepmod.fixedpoint import derive_requantizer
from sleepmod.tensor import (
    ConvLayerSpec,
    QuantTensor,
    adaptive_avg_pool_codes,
    adaptive_avg_pool_float,
    adaptive_pool_bounds,
    conv1d_float,
    conv1d_quant,
    fold_batchnorm,
    maxpool1d,
    quantize,
    relu,
)


def test_conv_identity_and_adjacent_sum():
    valid = ConvLayerSpec(1, 1, 1, padding="valid")
    np.testing.assert_array_equal(conv1d_float([[1, 2, 3]], [[[1]]], valid), [[1, 2, 3]])
    pair = ConvLayerSpec(1, 1, 2, padding="valid")
    np.testing.assert_array_equal(conv1d_float([[1, 2, 3, 4]], [[[1, 1]]], pair), [[3, 5, 7]])


def test_conv_matches_naive_oracle(rng):
    x = rng.standard_normal((1, 64))
    w = rng.standard_normal((3, 1, 5))
    got = conv1d_float(x, w, ConvLayerSpec(1, 3, 5, padding="valid"))
    np.testing.assert_allclose(got, naive_conv(x, w), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("n,k,stride", [(64, 5, 1), (64, 5, 3), (50, 8, 4), (47, 32, 4), (13, 22, 3)])
def test_same_padding_conv_matches_naive_oracle(rng, n, k, stride):
    spec = ConvLayerSpec(2, 3, k, stride)
    x = rng.standard_normal((2, n))
    w = rng.standard_normal((3, 2, k))
    t_out = -(-n // stride)
    total = max((t_out - 1) * stride + k - n, 0)
    want = naive_conv(x, w, stride, (total // 2, total - total // 2))
    got = conv1d_float(x, w, spec)
    assert got.shape == (3, t_out)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    spec = ConvLayerSpec(2, 1, 3)
    with pytest.raises(ValueError):
        conv1d_float(np.zeros((1, 10)), np.zeros((1, 2, 3)), spec)
    with pytest.raises(ValueError):
        conv1d_float(np.zeros((2, 10)), np.zeros((1, 2, 4)), spec)
    with pytest.raises(ValueError):
        conv1d_float(np.zeros((1, 2)), np.zeros((1, 1, 3)), ConvLayerSpec(1, 1, 3, padding="valid"))


def test_conv_quant_zero_input():
    spec = ConvLayerSpec(1, 4, 3)
    x = QuantTensor(np.zeros((1, 10), dtype=np.int8), 0.1)
    w = QuantTensor(np.ones((4, 1, 3), dtype=np.int8), 0.1)
    out = conv1d_quant(x, w, spec, derive_requantizer(0.1), 1.0)
    assert not out.data.any()


def test_conv_quant_rational_examples():
    spec = ConvLayerSpec(1, 1, 1, padding="valid")
    x = QuantTensor(np.array([[64, 64, 64]]), 1 / 64)  # real 1.0
    # kernel code 32 at scale 1/32 is real 1.0, so the output is real 1.0 = code 64
    w = QuantTensor(np.array([[[32]]]), 1 / 32)
    out = conv1d_quant(x, w, spec, derive_requantizer((1 / 64) * (1 / 32) / (1 / 64)), 1 / 64)
    np.testing.assert_array_equal(out.data, [[64, 64, 64]])
    # kernel real 0.5 gives real 0.5 = code 32
    w = QuantTensor(np.array([[[32]]]), 1 / 64)
    out = conv1d_quant(x, w, spec, derive_requantizer((1 / 64) * (1 / 64) / (1 / 64)), 1 / 64)
    np.testing.assert_array_equal(out.data, [[32, 32, 32]])
    np.testing.assert_allclose(out.dequantize(), 0.5)


def _random_quant_layer(rng, c_in=None, c_out=None, k=None, stride=None):
    c_in = c_in or int(rng.integers(1, 6))
    c_out = c_out or int(rng.integers(1, 10))
    k = k or int(rng.integers(1, 9))
    stride = stride or int(rng.integers(1, 4))
    n = int(rng.integers(k, 40))
    spec = ConvLayerSpec(c_in, c_out, k, stride)
    x = quantize(rng.uniform(-1, 1, (c_in, n)), 1 / 127)
    w = quantize(rng.uniform(-1, 1, (c_out, c_in, k)), 1 / 127)
    ref = conv1d_float(x.dequantize(), w.dequantize(), spec)
    out_scale = max(np.abs(ref).max(), 1e-3) / 127
    rq = derive_requantizer(x.scale * w.scale / out_scale)
    return spec, x, w, rq, out_scale, ref


def test_conv_quant_within_one_lsb_of_float_composition(rng):
    for _ in range(200):
        spec, x, w, rq, out_scale, ref = _random_quant_layer(rng)
        got = conv1d_quant(x, w, spec, rq, out_scale)
        want = quantize(ref, out_scale)
        assert np.max(np.abs(got.data.astype(int) - want.data.astype(int))) <= 1


def test_conv_quant_vs_float_within_three_lsb_over_1000_layers(rng):
    worst = 0.0
    for _ in range(1000):
        spec, x, w, rq, out_scale, ref = _random_quant_layer(rng)
        got = conv1d_quant(x, w, spec, rq, out_scale)
        worst = max(worst, np.max(np.abs(got.dequantize() - ref)) / out_scale)
    assert worst <= 3


def test_conv_quant_blocking_invariance_and_trace(rng):
    spec, x, w, rq, out_scale, _ = _random_quant_layer(rng, c_in=3, c_out=10, k=5, stride=2)
    log = []
    blocked = conv1d_quant(x, w, spec, rq, out_scale, trace=log.append)
    single = conv1d_quant(x, w, spec, rq, out_scale, block=1)
    whole = conv1d_quant(x, w, spec, rq, out_scale, block=64)
    np.testing.assert_array_equal(blocked.data, single.data)
    np.testing.assert_array_equal(blocked.data, whole.data)
    assert [e["kernels"] for e in log] == [(0, 4), (4, 8), (8, 10)]


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool1d(np.array([[1, 3, 2, 5]]), 2, 2), [[3, 5]])
    np.testing.assert_array_equal(maxpool1d(np.full((2, 9), 4.0), 3, 2), np.full((2, 4), 4.0))
    with pytest.raises(ValueError):
        maxpool1d(np.zeros((1, 3)), 4, 1)


def test_maxpool_matches_naive_oracle(rng):
    for window, stride in [(2, 2), (3, 1), (27, 27), (15, 5)]:
        x = rng.standard_normal((4, 100))
        np.testing.assert_array_equal(maxpool1d(x, window, stride), naive_maxpool(x, window, stride))


def test_relu_examples(rng):
    np.testing.assert_array_equal(relu(np.array([-1, 0, 2])), [0, 0, 2])
    assert not relu(-rng.uniform(0.1, 1, 50)).any()
    x = rng.standard_normal(200)
    np.testing.assert_array_equal(relu(x), [v if v > 0 else 0.0 for v in x])


def test_quant_maxpool_relu_commute_with_dequantize_exhaustively():
    codes = np.arange(-128, 128).reshape(1, -1)
    shuffled = np.random.default_rng(0).permutation(codes.ravel()).reshape(1, -1)
    for c in (codes, shuffled):
        q = QuantTensor(c, 0.37)
        np.testing.assert_array_equal(relu(q).dequantize(), relu(q.dequantize()))
        for window, stride in [(1, 1), (2, 1), (3, 2), (4, 3), (7, 5)]:
            np.testing.assert_array_equal(maxpool1d(q, window, stride).dequantize(),
                                          maxpool1d(q.dequantize(), window, stride))
    # on codes a symmetric quantizer can produce, re-quantizing is exact too
    q = QuantTensor(np.arange(-127, 128).reshape(1, -1), 0.37)
    np.testing.assert_array_equal(maxpool1d(q, 3, 2).data,
                                  quantize(maxpool1d(q.dequantize(), 3, 2), q.scale).data)


def test_fold_batchnorm_examples(rng):
    w = rng.standard_normal((3, 2, 4))
    ones, zeros = np.ones(3), np.zeros(3)
    wf, b = fold_batchnorm(w, ones, zeros, zeros, ones, eps=0.0)
    np.testing.assert_array_equal(wf, w)
    np.testing.assert_array_equal(b, zeros)
    wf, b = fold_batchnorm(w, 2 * ones, ones, zeros, ones, eps=0.0)
    np.testing.assert_array_equal(wf, 2 * w)
    np.testing.assert_array_equal(b, ones)
    with pytest.raises(ValueError):
        fold_batchnorm(w, ones, zeros, zeros, -ones)


def test_fold_batchnorm_matches_explicit_composition(rng):
    spec = ConvLayerSpec(2, 3, 5, 2)
    x = rng.standard_normal((2, 40))
    w = rng.standard_normal((3, 2, 5))
    gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    mean, var = rng.standard_normal(3), rng.uniform(0.1, 3, 3)
    y = conv1d_float(x, w, spec)
    explicit = gamma[:, None] * (y - mean[:, None]) / np.sqrt(var[:, None] + 1e-5) + beta[:, None]
    wf, b = fold_batchnorm(w, gamma, beta, mean, var)
    np.testing.assert_allclose(conv1d_float(x, wf, spec, bias=b), explicit, rtol=1e-6, atol=1e-12)


def test_quantize_roundtrip_bound_and_symmetry(rng):
    x = rng.uniform(-1, 1, 1000)
    q = quantize(x, 1 / 127)
    assert np.max(np.abs(q.dequantize() - x)) <= q.scale / 2 + 1e-15
    np.testing.assert_array_equal(quantize(-x, 1 / 127).data, -q.data)
    np.testing.assert_array_equal(quantize([0.5 / 127, -0.5 / 127], 1 / 127).data, [1, -1])
    np.testing.assert_array_equal(quantize([1e9, -1e9], 1.0).data, [127, -127])
    with pytest.raises(ValueError):
        QuantTensor(np.zeros(3), 0.0)


def test_adaptive_pool_bounds_and_values():
    assert adaptive_pool_bounds(10, 3) == [(0, 4), (3, 7), (6, 10)]
    b = adaptive_pool_bounds(768, 56)
    assert b[0][0] == 0 and b[-1][1] == 768 and len(b) == 56
    x = np.arange(12, dtype=float).reshape(2, 6)
    np.testing.assert_allclose(adaptive_avg_pool_float(x, 4), [1, 4, 7, 10])
    sums, widths = adaptive_avg_pool_codes(x.astype(np.int64), 4)
    np.testing.assert_allclose(sums / widths, [1, 4, 7, 10])
    with pytest.raises(ValueError):
        adaptive_pool_bounds(3, 4)
