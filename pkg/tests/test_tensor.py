import numpy as np
import pytest

from attention_clusters import tensor as T
from attention_clusters.errors import ConfigError, DegenerateVectorError, DimensionError, NumericError
from attention_clusters.gradcheck import FD_TOLERANCE, GRADCHECK_CASES, check_gradients, gradcheck_op


# ----------------------------------------------------------------------------
# gradient oracle: every op, 100 random instances, 64-bit central differences
# ----------------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_gradcheck_100_instances(name):
    assert gradcheck_op(name, instances=100, seed=7) < FD_TOLERANCE


def test_matmul_sum_gradient_is_ones_times_b_transpose(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 2))
    T.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.T, rtol=1e-12)


# ----------------------------------------------------------------------------
# forward examples
# ----------------------------------------------------------------------------


def test_matmul_examples():
    np.testing.assert_array_equal(T.matmul([[1.0, 0.0], [0.0, 1.0]], [[3.0], [4.0]]).data, [[3], [4]])
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.item() == 11


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_conv2d_zero_kernel_bias():
    out = T.conv2d(np.random.default_rng(0).normal(size=(1, 5, 5)), np.zeros((1, 1, 5, 5)), np.array([7.0]))
    np.testing.assert_array_equal(out.data, [[[7.0]]])


def test_conv2d_mnist_shape():
    out = T.conv2d(np.zeros((1, 28, 28), np.float32), np.zeros((10, 1, 5, 5), np.float32))
    assert out.shape == (10, 24, 24)


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    out = T.conv2d(x, k, b).data
    ref = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for f in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, f, i, j] = (x[n, :, i:i + 3, j:j + 2] * k[f]).sum() + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_too_small_input():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 5, 5)))


def test_maxpool_examples():
    assert T.maxpool2(np.array([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 4
    np.testing.assert_array_equal(T.maxpool2(np.full((2, 4, 6), 5.0)).data, np.full((2, 2, 3), 5.0))


def test_maxpool_tie_goes_to_first_index():
    x = T.Tensor(np.full((1, 2, 2), 4.0), requires_grad=True)
    T.maxpool2(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_odd_dimension():
    with pytest.raises(DimensionError):
        T.maxpool2(np.zeros((1, 3, 4)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax([0.0, 0.0]).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax([3.0, 3.0, 3.0]).data, [1 / 3] * 3, atol=1e-7)
    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax(x).data, oracle, rtol=1e-12)
    np.testing.assert_allclose(T.softmax(x).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_large_inputs_stable_and_shift_invariant(rng):
    x = rng.normal(size=20) * 50
    s = T.softmax(x).data
    assert abs(s.sum() - 1) < 1e-6
    np.testing.assert_allclose(T.softmax(x + 1000.0).data, s, atol=1e-6)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax([0.0, np.nan])


def test_l2normalize_examples():
    np.testing.assert_allclose(T.l2normalize([3.0, 4.0]).data, [0.6, 0.8], rtol=1e-6)
    u = np.array([0.0, 1.0, 0.0])
    out = T.l2normalize(u, scale=1 / np.sqrt(4)).data
    np.testing.assert_allclose(out, [0, 0.5, 0], atol=1e-7)


def test_l2normalize_degenerate():
    with pytest.raises(DegenerateVectorError):
        T.l2normalize(np.zeros(3))


def test_relu_dropout_concat_cross_entropy():
    np.testing.assert_array_equal(T.relu([-2.0, 3.0]).data, [0, 3])
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert T.dropout(x, 0.0, np.random.default_rng(0), training=True).data is not None
    np.testing.assert_array_equal(T.dropout(x, 0.0, np.random.default_rng(0)).data, x)
    np.testing.assert_array_equal(T.dropout(x, 0.7, None, training=False).data, x)
    assert T.concat([np.zeros((2, 3)), np.zeros((2, 4))]).shape == (2, 7)
    loss = T.cross_entropy(np.zeros((3, 1024)), [0, 5, 1023])
    assert abs(loss.item() - np.log(1024)) < 1e-6


def test_dropout_rejects_p_of_one():
    with pytest.raises(ConfigError):
        T.dropout(np.ones(3), 1.0, np.random.default_rng(0))


def test_dropout_keeps_expectation():
    x = np.ones(200_000, dtype=np.float64)
    out = T.dropout(x, 0.4, np.random.default_rng(3)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) == {0.0, 1.0 / 0.6}


# ----------------------------------------------------------------------------
# tape properties
# ----------------------------------------------------------------------------


def _graph(rng):
    x = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    h = T.tanh(T.linear(x, w))
    out = T.cross_entropy(T.concat([h, h * h], axis=-1), [0, 1, 2, 3])
    return x, w, h, out


def test_backward_does_not_mutate_forward_outputs(rng):
    x, w, h, out = _graph(rng)
    before = (h.data.tobytes(), out.data.tobytes(), x.data.tobytes())
    out.backward()
    assert (h.data.tobytes(), out.data.tobytes(), x.data.tobytes()) == before


def test_identical_tapes_give_identical_gradients():
    grads = []
    for _ in range(2):
        x, w, _, out = _graph(np.random.default_rng(5))
        out.backward()
        grads.append((x.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]


def test_shared_node_visited_once_and_accumulates():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()  # d/dx 2x^2 = 4x
    np.testing.assert_allclose(x.grad, [8.0])


def test_deep_chain_does_not_recurse():
    x = T.Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_float32_default_and_float64_preserved():
    assert T.Tensor([1, 2]).dtype == np.float32
    assert T.Tensor(np.zeros(2)).dtype == np.float64


def test_check_gradients_detects_wrong_rule():
    def bad_square(t):
        return T._result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    assert check_gradients(bad_square, [np.array([1.0, 2.0, 3.0])]) > 0.1
