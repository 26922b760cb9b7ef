import numpy as np
import pytest

from core import ops
from core.errors import ConfigurationError, InputError, NumericError, UsageError
from core.tensor import Parameter, Tensor, no_grad

TRIALS = 20


def numeric_grad(fn, arrays, index, eps=1e-6):
    """Central differences of scalar fn(*arrays) w.r.t. arrays[index]."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        plus = fn(*arrays)
        x[i] = orig - eps
        minus = fn(*arrays)
        x[i] = orig
        grad[i] = (plus - minus) / (2 * eps)
    return grad


def check_op_gradients(op, arrays, rng, wrt=None):
    """Compare backward() against finite differences of sum(op(...) * R) in float64."""
    arrays = [a.astype(np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    proj = rng.standard_normal(out_shape)

    def scalar(*arrs):
        with no_grad():
            return float(np.sum(op(*[Tensor(a) for a in arrs]).data * proj))

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    op(*tensors).backward(proj)
    for i in wrt:
        expected = numeric_grad(scalar, arrays, i)
        np.testing.assert_allclose(tensors[i].grad, expected, rtol=1e-2, atol=1e-4)


def naive_conv(x, w, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for b in range(n):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    for c in range(c_in):
                        for di in range(k):
                            for dj in range(k):
                                out[b, o, i, j] += xp[b, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
    return out


def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(ops.conv2d(x, w).data, x.data)


def test_conv2d_sum_kernel():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive_loops(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    expected = naive_conv(x.astype(np.float64), w.astype(np.float64), stride, padding)
    assert out.shape == expected.shape
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ConfigurationError):
        ops.conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ConfigurationError):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 5, 5))))
    with pytest.raises(ConfigurationError):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), stride=0)


def test_relu_examples():
    out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    x = Tensor(np.array([-1.0, 3.0]), requires_grad=True)
    ops.relu(x).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_batch_norm_gamma_beta_shift():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    state = ops.BatchNormState.for_channels(2)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.full(2, 3.0)), state)
    np.testing.assert_allclose(out.data, x + 3.0, atol=1e-4)


def test_batch_norm_output_moments_follow_gamma_beta():
    x = np.random.default_rng(7).standard_normal((8, 4, 5, 5))
    state = ops.BatchNormState.for_channels(4)
    out = ops.batch_norm(Tensor(x), Tensor(np.full(4, 1.5)), Tensor(np.full(4, 0.25)), state).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.25, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.5, atol=1e-4)


def test_batch_norm_constant_channel_is_zero():
    x = np.random.default_rng(8).standard_normal((4, 2, 3, 3))
    x[:, 1] = 7.0
    state = ops.BatchNormState.for_channels(2)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state).data
    np.testing.assert_array_equal(out[:, 1], 0.0)


def test_batch_norm_updates_running_stats_in_train_only():
    x = Tensor(np.random.default_rng(2).standard_normal((4, 2, 3, 3)) + 5.0)
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    state = ops.BatchNormState.for_channels(2)
    ops.batch_norm(x, gamma, beta, state, training=False)
    np.testing.assert_array_equal(state.running_mean, np.zeros(2))
    ops.batch_norm(x, gamma, beta, state, training=True)
    assert np.all(state.running_mean > 0.4)


def test_global_avg_pool_and_fc_shapes():
    x = Tensor(np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2))
    pooled = ops.global_avg_pool(x)
    assert pooled.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(pooled.data[0, :, 0, 0], [1.5, 5.5, 9.5])
    logits = ops.fully_connected(pooled, Tensor(np.ones((4, 3))), Tensor(np.zeros(4)))
    assert logits.shape == (2, 4)
    with pytest.raises(ConfigurationError):
        ops.fully_connected(pooled, Tensor(np.ones((4, 2))), Tensor(np.zeros(4)))


def test_fully_connected_examples():
    rng = np.random.default_rng(5)
    w, b = rng.standard_normal((4, 3)), rng.standard_normal(4)
    np.testing.assert_array_equal(ops.fully_connected(Tensor(np.zeros((2, 3))), Tensor(w), Tensor(b)).data,
                                  np.tile(b, (2, 1)))
    x = rng.standard_normal((5, 3, 1, 1))
    passed = ops.fully_connected(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(passed.data, x[:, :, 0, 0])
    expected = np.array([[sum(x[n, c, 0, 0] * w[k, c] for c in range(3)) + b[k] for k in range(4)] for n in range(5)])
    np.testing.assert_allclose(ops.fully_connected(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-12)


def test_global_avg_pool_of_fully_masked_feature_is_zero():
    x = Tensor(np.random.default_rng(6).standard_normal((2, 3, 4, 4)))
    pooled = ops.global_avg_pool(ops.elementwise_mul(x, np.zeros((4, 4))))
    np.testing.assert_array_equal(pooled.data, 0.0)


def test_elementwise_mul_validates_mask():
    x = Tensor(np.ones((1, 2, 3, 3)))
    with pytest.raises(ConfigurationError):
        ops.elementwise_mul(x, np.ones((4, 4)))
    with pytest.raises(ConfigurationError):
        ops.elementwise_mul(x, np.full((3, 3), 0.5))
    out = ops.elementwise_mul(x, np.eye(3))
    assert out.data.sum() == 6.0


def test_cross_entropy_uniform_logits():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(np.log(10.0), abs=1e-9)


def test_cross_entropy_hundred_classes_uniform():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((2, 100))), np.array([0, 99]))
    assert loss.item() == pytest.approx(4.60517, abs=1e-5)


def test_cross_entropy_large_logits_stay_finite():
    confident = ops.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), np.array([0]))
    assert confident.item() == pytest.approx(0.0, abs=1e-12)
    wrong = ops.softmax_cross_entropy(Tensor(np.array([[1e4, -1e4]])), np.array([1]))
    assert np.isfinite(wrong.item())
    assert wrong.item() == pytest.approx(2e4)


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(11)
    for _ in range(TRIALS):
        logits = rng.standard_normal((6, 7)) * 3
        labels = rng.integers(0, 7, size=6)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.log(probs[np.arange(6), labels]).mean()
        got = ops.softmax_cross_entropy(Tensor(logits), labels).item()
        assert abs(got - expected) < 1e-6


def test_cross_entropy_label_errors():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(InputError):
        ops.softmax_cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(InputError):
        ops.softmax_cross_entropy(logits, np.array([0.0, 1.0]))


def test_non_finite_forward_is_numeric_error():
    with pytest.raises(NumericError):
        ops.relu(Tensor(np.array([np.nan, 1.0])))


def test_backward_twice_is_usage_error():
    w = Parameter(np.ones((2, 3)), "w")
    logits = ops.fully_connected(Tensor(np.ones((1, 3))), w, Parameter(np.zeros(2), "b"))
    loss = ops.softmax_cross_entropy(logits, np.array([1]))
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_no_grad_builds_no_graph():
    w = Parameter(np.ones((2, 2, 1, 1)), "w")
    with no_grad():
        out = ops.conv2d(Tensor(np.ones((1, 2, 2, 2))), w)
    assert out._ctx is None and not out.requires_grad


def test_gradients_accumulate_across_shared_parents():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    ops.add(ops.scale(x, 2.0), ops.scale(x, 3.0)).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


# finite-difference checks, TRIALS random draws per op

def test_conv2d_gradients():
    rng = np.random.default_rng(10)
    for t in range(TRIALS):
        stride, padding = [(1, 0), (1, 1), (2, 1)][t % 3]
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        check_op_gradients(lambda a, b: ops.conv2d(a, b, stride, padding), [x, w], rng)


def test_relu_gradients():
    rng = np.random.default_rng(11)
    for _ in range(TRIALS):
        x = rng.standard_normal((2, 3, 3, 3))
        x[np.abs(x) < 1e-3] = 0.5
        check_op_gradients(ops.relu, [x], rng)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(12)
    for _ in range(TRIALS):
        x = rng.standard_normal((3, 2, 3, 3)) * 2 + 1
        gamma = rng.standard_normal(2)
        beta = rng.standard_normal(2)
        state = ops.BatchNormState(rng.standard_normal(2).astype(np.float32),
                                   rng.uniform(0.5, 2.0, 2).astype(np.float32))
        check_op_gradients(lambda a, g, b: ops.batch_norm(a, g, b, state, training), [x, gamma, beta], rng)


def test_global_avg_pool_gradients():
    rng = np.random.default_rng(13)
    for _ in range(TRIALS):
        check_op_gradients(ops.global_avg_pool, [rng.standard_normal((2, 3, 4, 4))], rng)


def test_fully_connected_gradients():
    rng = np.random.default_rng(14)
    for _ in range(TRIALS):
        x = rng.standard_normal((3, 4, 1, 1))
        check_op_gradients(ops.fully_connected, [x, rng.standard_normal((5, 4)), rng.standard_normal(5)], rng)


def test_elementwise_mul_gradients():
    rng = np.random.default_rng(15)
    for _ in range(TRIALS):
        mask = (rng.random((4, 4)) < 0.5).astype(np.uint8)
        check_op_gradients(lambda a: ops.elementwise_mul(a, mask), [rng.standard_normal((2, 3, 4, 4))], rng)


def test_cross_entropy_gradients():
    rng = np.random.default_rng(16)
    for _ in range(TRIALS):
        labels = rng.integers(0, 5, size=4)
        check_op_gradients(lambda z: ops.softmax_cross_entropy(z, labels), [rng.standard_normal((4, 5))], rng)


def test_add_shift_scale_gradients():
    rng = np.random.default_rng(17)
    for _ in range(TRIALS):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        check_op_gradients(ops.add, [a, b], rng)
        check_op_gradients(lambda x: ops.shift(x, 1.5), [a], rng)
        check_op_gradients(lambda x: ops.scale(x, -0.7), [a], rng)
