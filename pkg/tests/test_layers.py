import numpy as np
import pytest

from tstcnn.tensor import ContractError, ShapeError, Tape, Tensor, reduce_sum
from tstcnn.layers import (
    BatchNorm3d,
    Bilinear,
    Conv3d,
    Linear,
    batchnorm3d,
    bilinear_fusion,
    conv3d,
    cross_entropy_logits,
    flatten,
    linear,
    maxpool3d,
    relu,
    same_padding,
    sigmoid,
    softmax,
    trilinear_upsample,
)

from oracles import finite_diff_grads, max_rel_error, naive_conv3d, naive_maxpool3d, naive_softmax


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def check_op_gradients(build, arrays, rel=1e-4, eps=1e-6):
    """Autodiff vs central finite differences for scalar build(tensors)."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.backward(build(*tensors))

    def f():
        return build(*[Tensor(a) for a in arrays]).item()

    fds = finite_diff_grads(f, arrays, eps=eps)
    for t, fd in zip(tensors, fds):
        assert max_rel_error(t.grad, fd) < rel


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_parameter_count_first_layer():
    rng = np.random.default_rng(0)
    conv = Conv3d(3, 30, 3, rng)
    count = conv.weight.size + conv.bias.size
    assert count == 30 * 3 * 27 + 30 == 2460


def test_conv3d_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 1, 4, 5, 6)))
    w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1, 1] = 1.0
    out = conv3d(x, Tensor(w), Tensor(np.zeros(1, dtype=np.float32)), padding=same_padding(3))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv3d_full_kernel_sums_input():
    x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    out = conv3d(t64(x), t64(np.ones((1, 1, 2, 2, 2))), t64(np.zeros(1)))
    assert out.data.shape == (1, 1, 1, 1, 1)
    np.testing.assert_allclose(out.data.reshape(()), x.sum())


def test_conv3d_channel_mismatch():
    rng = np.random.default_rng(2)
    conv = Conv3d(3, 4, 3, rng)
    with pytest.raises(ShapeError):
        conv(Tensor(rng.normal(size=(1, 2, 4, 4, 4))))


@pytest.mark.parametrize("stride,padding", [((1, 1, 1), (0, 0, 0)), ((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (1, 0, 1))])
def test_conv3d_matches_direct_summation(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv3d(t64(x), t64(w), t64(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, naive_conv3d(x, w, b, stride, padding), rtol=1e-10, atol=1e-10)


def test_conv3d_same_padding_preserves_extents_for_odd_kernels():
    rng = np.random.default_rng(4)
    for k in (1, 3, 5):
        x = Tensor(rng.normal(size=(1, 2, 7, 6, 9)).astype(np.float32))
        conv = Conv3d(2, 3, k, rng)
        assert conv(x).data.shape == (1, 3, 7, 6, 9)


def test_conv3d_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 3, 4, 3))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3, 3, 4, 3))  # random cotangent via weighted sum

    def build(xt, wt, bt):
        out = conv3d(xt, wt, bt, padding=(1, 1, 1))
        return reduce_sum(out * Tensor(r))

    check_op_gradients(build, [x, w, b])


# ---------------------------------------------------------------------------
# maxpool3d


def test_maxpool_constant_volume():
    x = Tensor(np.full((1, 2, 4, 6, 8), 2.5, dtype=np.float32))
    out = maxpool3d(x)
    assert out.data.shape == (1, 2, 2, 3, 4)
    assert np.all(out.data == np.float32(2.5))


def test_maxpool_all_values():
    x = t64(np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2))
    out = maxpool3d(x)
    assert out.data.reshape(()) == 8.0


def test_maxpool_odd_extent_floors():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 5, 5, 5)))
    out = maxpool3d(x)
    assert out.data.shape == (1, 1, 2, 2, 2)
    np.testing.assert_allclose(out.data, naive_maxpool3d(x.data))


def test_maxpool_extent_smaller_than_kernel():
    with pytest.raises(ShapeError):
        maxpool3d(Tensor(np.zeros((1, 1, 1, 4, 4), dtype=np.float32)))


def test_maxpool_backward_routes_to_argmax_first_tie():
    x = np.zeros((1, 1, 2, 2, 2), dtype=np.float64)  # all ties -> first index
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce_sum(maxpool3d(xt)))
    expected = np.zeros_like(x)
    expected[0, 0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(xt.grad, expected)


def test_maxpool_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 4, 5, 6))
    r = rng.normal(size=(2, 2, 2, 2, 3))

    def build(xt):
        return reduce_sum(maxpool3d(xt) * Tensor(r))

    check_op_gradients(build, [x])


# ---------------------------------------------------------------------------
# batchnorm3d


def bn64(channels):
    return BatchNorm3d(channels, dtype=np.float64)


def test_batchnorm_constant_input_zero_output():
    bn = bn64(2)
    x = Tensor(np.concatenate([np.full((1, 1, 2, 2, 2), 3.0), np.full((1, 1, 2, 2, 2), -1.0)], axis=1))
    out = bn(x, train=True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_batchnorm_two_value_channel_frozen():
    # channel values {1,3} with gamma=2, beta=5 and eps -> 0 give {3,7}
    bn = BatchNorm3d(1, eps=1e-12, dtype=np.float64)
    bn.gamma.data[:] = 2.0
    bn.beta.data[:] = 5.0
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2, 1, 1))
    out = bn(x, train=True)
    np.testing.assert_allclose(out.data.reshape(-1), [3.0, 7.0], rtol=1e-6)


def test_batchnorm_train_statistics_property():
    rng = np.random.default_rng(7)
    bn = bn64(3)
    x = Tensor(rng.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 6, 7)))
    out = bn(x, train=True).data
    var = x.data.var(axis=(0, 2, 3, 4))
    for c in range(3):
        ch = out[:, c]
        assert abs(ch.mean()) < 1e-5
        assert abs(ch.var() - var[c] / (var[c] + bn.eps)) < 1e-3


def test_batchnorm_running_stats_and_eval_mode():
    rng = np.random.default_rng(8)
    bn = bn64(2)
    x = rng.normal(size=(2, 2, 3, 3, 3))
    bn(Tensor(x), train=True)
    mu = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    np.testing.assert_allclose(bn.running_mean, 0.1 * mu, rtol=1e-10)
    np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * var, rtol=1e-10)
    y = rng.normal(size=(1, 2, 2, 2, 2))
    out = bn(Tensor(y), train=False)
    expected = (y - bn.running_mean.reshape(1, 2, 1, 1, 1)) / np.sqrt(
        (bn.running_var + bn.eps).reshape(1, 2, 1, 1, 1)
    )
    np.testing.assert_allclose(out.data, expected, rtol=1e-10)


def test_batchnorm_single_element_contract_error():
    bn = bn64(2)
    with pytest.raises(ContractError):
        bn(Tensor(np.zeros((1, 2, 1, 1, 1))), train=True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 2, 3, 2))
    r = rng.normal(size=x.shape)
    bn = bn64(3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2.0, size=3)
    rm, rv = bn.running_mean, bn.running_var

    def build(xt, gt, bt):
        out = batchnorm3d(xt, gt, bt, rm.copy(), rv.copy(), bn.eps, bn.momentum, train)
        return reduce_sum(out * Tensor(r))

    check_op_gradients(build, [x, bn.gamma.data.copy() + 0.3, bn.beta.data.copy() - 0.2])


# ---------------------------------------------------------------------------
# trilinear upsampling


def test_upsample_constant_preserved():
    x = Tensor(np.full((1, 2, 2, 3, 4), 1.25, dtype=np.float64))
    out = trilinear_upsample(x, (4, 6, 8))
    assert out.data.shape == (1, 2, 4, 6, 8)
    np.testing.assert_allclose(out.data, 1.25, rtol=1e-12)


def test_upsample_identity_when_same_extents():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 3, 4, 5)))
    out = trilinear_upsample(x, (3, 4, 5))
    np.testing.assert_array_equal(out.data, x.data)


def test_upsample_rejects_downsampling():
    with pytest.raises(ContractError):
        trilinear_upsample(Tensor(np.zeros((1, 1, 4, 4, 4), dtype=np.float32)), (2, 4, 4))


def test_upsample_exact_on_trilinear_field():
    # f(t,h,w) = t + 2h + 3w sampled on a grid, doubled extents; the oracle
    # evaluates f analytically at half-pixel-center source coordinates.
    T, H, W = 3, 4, 5
    ts, hs, ws = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    f = (ts + 2 * hs + 3 * ws).astype(np.float64)
    out = trilinear_upsample(Tensor(f[None, None]), (2 * T, 2 * H, 2 * W)).data[0, 0]

    def src_coord(i, n):
        return np.clip((i + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)

    tt = src_coord(np.arange(2 * T), T)[:, None, None]
    hh = src_coord(np.arange(2 * H), H)[None, :, None]
    ww = src_coord(np.arange(2 * W), W)[None, None, :]
    expected = tt + 2 * hh + 3 * ww
    interior = (slice(1, -1),) * 3
    np.testing.assert_allclose(out[interior], expected[interior], atol=1e-5)


def test_upsample_gradients():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 2, 2, 3, 2))
    r = rng.normal(size=(1, 2, 5, 6, 4))

    def build(xt):
        return reduce_sum(trilinear_upsample(xt, (5, 6, 4)) * Tensor(r))

    check_op_gradients(build, [x])


# ---------------------------------------------------------------------------
# activations


def test_relu_example():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_sigmoid_examples():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    big = sigmoid(Tensor([-500.0, 500.0]))
    assert 0.0 < big.data[0] < 1e-100 or big.data[0] == 0.0  # no overflow warnings
    assert big.data[1] <= 1.0


def test_softmax_frozen_thirds():
    logits = np.log(np.array([1.0, 2.0, 3.0]))
    out = softmax(Tensor(logits[None, :], dtype=np.float64))
    np.testing.assert_allclose(out.data[0], [1 / 6, 2 / 6, 3 / 6], rtol=1e-10)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 5)) * 10
    p1 = softmax(Tensor(x, dtype=np.float64)).data
    p2 = softmax(Tensor(x + 123.456, dtype=np.float64)).data
    np.testing.assert_allclose(p1.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p1, p2, atol=1e-6)
    np.testing.assert_allclose(p1, naive_softmax(x, axis=1), rtol=1e-10)
    assert np.all(p1 > 0)


def test_activation_gradients():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 4)) + 0.1  # keep away from the relu kink
    r = rng.normal(size=(3, 4))
    check_op_gradients(lambda t: reduce_sum(relu(t) * Tensor(r)), [np.abs(x) + 0.05])
    check_op_gradients(lambda t: reduce_sum(sigmoid(t) * Tensor(r)), [x])
    check_op_gradients(lambda t: reduce_sum(softmax(t, axis=1) * Tensor(r)), [x])


# ---------------------------------------------------------------------------
# linear / bilinear


def test_linear_examples():
    x = t64([[1.0, 2.0]])
    out = linear(x, t64([[3.0, 4.0]]), t64([5.0]))
    np.testing.assert_allclose(out.data, [[16.0]])
    zero_w = linear(x, t64(np.zeros((3, 2))), t64([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(zero_w.data, [[1.0, 2.0, 3.0]])
    ident = linear(x, t64(np.eye(2)), t64(np.zeros(2)))
    np.testing.assert_allclose(ident.data, x.data)


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        linear(t64([[1.0, 2.0, 3.0]]), t64([[1.0, 2.0]]), t64([0.0]))


def test_bilinear_examples():
    a = t64([[1.0, 2.0]])
    b = t64([[3.0]])
    w = t64(np.array([[[1.0], [2.0]]]))  # (O=1, F1=2, F2=1)
    out = bilinear_fusion(a, b, w, t64([0.0]))
    np.testing.assert_allclose(out.data, [[15.0]])
    zero = bilinear_fusion(a, b, t64(np.zeros((2, 2, 1))), t64([4.0, -1.0]))
    np.testing.assert_allclose(zero.data, [[4.0, -1.0]])
    scalar = bilinear_fusion(t64([[1.0]]), t64([[1.0]]), t64(np.full((3, 1, 1), 2.0)), t64([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(scalar.data, [[3.0, 4.0, 5.0]])


def test_linear_and_bilinear_gradients():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 4))
    b = rng.normal(size=2)
    r = rng.normal(size=(3, 2))
    check_op_gradients(lambda xt, wt, bt: reduce_sum(linear(xt, wt, bt) * Tensor(r)), [x, w, b])

    a2 = rng.normal(size=(3, 4))
    b2 = rng.normal(size=(3, 5))
    w2 = rng.normal(size=(2, 4, 5))
    c2 = rng.normal(size=2)
    check_op_gradients(
        lambda at, bt, wt, ct: reduce_sum(bilinear_fusion(at, bt, wt, ct) * Tensor(r)),
        [a2, b2, w2, c2],
    )


def test_cross_entropy_gradients_and_value():
    rng = np.random.default_rng(14)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    p = naive_softmax(logits, axis=1)
    expected = -np.log(p[np.arange(4), labels]).mean()
    loss = cross_entropy_logits(t64(logits), labels)
    np.testing.assert_allclose(loss.item(), expected, rtol=1e-10)
    check_op_gradients(lambda t: cross_entropy_logits(t, labels), [logits])


def test_flatten_roundtrip_gradient():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(2, 3, 2, 2, 2))
    r = rng.normal(size=(2, 24))
    check_op_gradients(lambda t: reduce_sum(flatten(t) * Tensor(r)), [x])
