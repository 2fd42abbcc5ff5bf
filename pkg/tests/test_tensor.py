import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mintlab import tensor as T
from mintlab.errors import (BatchSizeError, DimensionError, LabelError, NumericalError,
                            ParameterError, UsageError)

import gradcheck
from oracles import conv2d_loop, dense_loop, maxpool_grad_loop, maxpool_loop, rel_error


def P(a, dtype=np.float32):
    return T.Parameter(np.asarray(a, dtype=dtype))


# -- dense ---------------------------------------------------------------------

def test_dense_identity_weights():
    out = T.dense(T.Tensor([[1.0, 2.0]]), P([[1, 0], [0, 1]]), P([0, 0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_dense_zero_weights_pass_bias():
    out = T.dense(T.Tensor([[1.0, 2.0]]), P([[0, 0], [0, 0]]), P([3, 4]))
    np.testing.assert_array_equal(out.data, [[3, 4]])


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3)).astype(np.float32)
    W = rng.standard_normal((3, 2)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = T.dense(T.Tensor(x), P(W), P(b)).data
    assert rel_error(out, dense_loop(x, W, b)) <= 1e-5


def test_dense_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        T.dense(T.Tensor(np.ones((2, 3))), P(np.ones((4, 2))), P(np.zeros(2)))
    with pytest.raises(DimensionError):
        T.dense(T.Tensor(np.ones(3)), P(np.ones((3, 2))), P(np.zeros(2)))


# -- conv2d --------------------------------------------------------------------

def test_conv_1x1_identity():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3, 1)
    out = T.conv2d(T.Tensor(x), P(np.ones((1, 1, 1, 1))), P([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv_bias_only_on_zero_input():
    rng = np.random.default_rng(1)
    out = T.conv2d(T.Tensor(np.zeros((2, 5, 5, 3))), P(rng.standard_normal((3, 3, 3, 4))),
                   P(np.full(4, 0.5)), padding=1)
    assert np.all(out.data == 0.5)


def test_conv_matches_loop_oracle_reference_case():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 4, 2)).astype(np.float32)
    K = rng.standard_normal((3, 3, 2, 2)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = T.conv2d(T.Tensor(x), P(K), P(b)).data
    assert out.shape == (1, 2, 2, 2)
    assert rel_error(out, conv2d_loop(x, K, b)) <= 1e-5


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_loop_oracle_random(seed):
    rng = np.random.default_rng(100 + seed)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    h = int(rng.integers(k, 8))
    x = rng.standard_normal((2, h, h + 1, int(rng.integers(1, 4)))).astype(np.float32)
    K = rng.standard_normal((k, k, x.shape[3], int(rng.integers(1, 5)))).astype(np.float32)
    b = rng.standard_normal(K.shape[3]).astype(np.float32)
    out = T.conv2d(T.Tensor(x), P(K), P(b), stride, pad).data
    assert rel_error(out, conv2d_loop(x, K, b, stride, pad)) <= 1e-5


def test_conv_chunked_equals_unchunked(monkeypatch):
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.standard_normal((7, 6, 6, 3)).astype(np.float32))
    K, b = P(rng.standard_normal((3, 3, 3, 4))), P(np.zeros(4))
    whole = T.conv2d(x, K, b, padding=1).data
    monkeypatch.setattr(T, "_CONV_CHUNK_FLOATS", 1)
    np.testing.assert_array_equal(T.conv2d(x, K, b, padding=1).data, whole)


def test_conv_rejects_bad_inputs():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.ones((1, 4, 4, 2))), P(np.ones((3, 3, 3, 1))), P([0.0]))
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.ones((1, 2, 2, 1))), P(np.ones((3, 3, 1, 1))), P([0.0]))
    with pytest.raises(ParameterError):
        T.conv2d(T.Tensor(np.ones((1, 4, 4, 1))), P(np.ones((3, 3, 1, 1))), P([0.0]), stride=0)


# -- maxpool -------------------------------------------------------------------

def test_maxpool_constant_input():
    out = T.maxpool2d(T.Tensor(np.full((2, 6, 6, 3), 1.5)), 2, 2)
    assert out.shape == (2, 3, 3, 3) and np.all(out.data == 1.5)


def test_maxpool_forced_maximum():
    out = T.maxpool2d(T.Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 2, 2, 1)), 2)
    assert out.data.reshape(-1).tolist() == [4.0]


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 6, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.maxpool2d(T.Tensor(x), 2, 2).data, maxpool_loop(x, 2, 2))


def test_maxpool_tie_routes_to_first_maximum():
    x = P(np.ones((1, 2, 2, 1)))
    with T.Tape() as tape:
        loss = T.sum_(T.maxpool2d(x, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad.reshape(-1), [1, 0, 0, 0])


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (3, 2)])
def test_maxpool_backward_matches_loop(window, stride):
    rng = np.random.default_rng(window * 10 + stride)
    x = P(rng.integers(0, 4, (2, 7, 7, 2)).astype(np.float32))  # plenty of ties
    with T.Tape() as tape:
        out = T.maxpool2d(x, window, stride)
        g = rng.standard_normal(out.shape)
        loss = T.sum_(T.mul(out, T.Tensor(g.astype(np.float32))))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, maxpool_grad_loop(x.data, g, window, stride),
                               rtol=1e-5, atol=1e-6)


# -- activations ----------------------------------------------------------------

def test_relu_and_sigmoid_definitions():
    assert T.activation(T.Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    assert T.activation(T.Tensor([0.0]), "sigmoid").data.tolist() == [0.5]
    with pytest.raises(ParameterError):
        T.activation(T.Tensor([0.0]), "tanh")


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=50))
def test_sigmoid_open_interval(values):
    for dtype in (np.float32, np.float64):
        p = T.sigmoid(T.Tensor(np.array(values, dtype=dtype))).data
        assert np.all(p > 0) and np.all(p < 1)


def test_sigmoid_gradient_finite_difference():
    rng = np.random.default_rng(4)
    x = P(rng.standard_normal(20) * 3, np.float64)
    with T.Tape() as tape:
        loss = T.sum_(T.sigmoid(x))
    tape.backward(loss)
    eps = 1e-6
    num = (1 / (1 + np.exp(-(x.data + eps))) - 1 / (1 + np.exp(-(x.data - eps)))) / (2 * eps)
    assert np.max(np.abs(x.grad - num)) <= 1e-6


# -- batchnorm / dropout ----------------------------------------------------------

def test_batchnorm_zero_variance_column():
    x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    stats = T.RunningStats(2, np.float64)
    out = T.batchnorm1d(T.Tensor(x), P(np.ones(2), np.float64), P(np.zeros(2), np.float64),
                        "train", stats)
    assert np.all(out.data[:, 0] == 0)


def test_batchnorm_train_normalises():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((64, 4)) * 3 + 7
    out = T.batchnorm1d(T.Tensor(x), P(np.ones(4), np.float64), P(np.zeros(4), np.float64),
                        "train", T.RunningStats(4, np.float64)).data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-5)


def test_batchnorm_running_stats_and_eval_determinism():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((10, 3))
    stats = T.RunningStats(3, np.float64)
    g, b = P(np.ones(3), np.float64), P(np.zeros(3), np.float64)
    T.batchnorm1d(T.Tensor(x), g, b, "train", stats)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=0))
    a = T.batchnorm1d(T.Tensor(x), g, b, "eval", stats).data
    np.testing.assert_array_equal(a, T.batchnorm1d(T.Tensor(x), g, b, "eval", stats).data)


def test_batchnorm_needs_two_rows_in_train():
    with pytest.raises(BatchSizeError):
        T.batchnorm1d(T.Tensor(np.ones((1, 3))), P(np.ones(3)), P(np.zeros(3)), "train",
                      T.RunningStats(3))


def test_dropout_eval_and_zero_rate_are_identity():
    x = T.Tensor(np.arange(6.0).reshape(2, 3))
    assert T.dropout(x, 0.5, "eval") is x
    assert T.dropout(x, 0.0, "train", np.random.default_rng(0)) is x


def test_dropout_statistics():
    x = T.Tensor(np.ones(100_000))
    out = T.dropout(x, 0.5, "train", np.random.default_rng(7)).data
    kept = out[out != 0]
    assert abs(len(kept) / out.size - 0.5) <= 0.01
    assert abs(kept.mean() - 2.0) <= 0.04


def test_dropout_same_seed_same_mask():
    x = T.Tensor(np.ones(1000))
    a = T.dropout(x, 0.3, "train", np.random.default_rng(8)).data
    b = T.dropout(x, 0.3, "train", np.random.default_rng(8)).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ParameterError):
        T.dropout(x, 1.0, "train", np.random.default_rng(0))


# -- losses --------------------------------------------------------------------

def test_bce_perfect_and_half():
    t = np.array([1.0, 0.0, 1.0])
    assert T.bce_loss(T.Tensor(t), t).item() <= 1e-6
    assert math.isclose(T.bce_loss(T.Tensor(np.full(4, 0.5)), np.array([1, 0, 1, 0])).item(),
                        math.log(2), rel_tol=1e-6)


def test_bce_direct_sum():
    rng = np.random.default_rng(9)
    p, t = rng.uniform(0.01, 0.99, 50), (rng.random(50) < 0.5).astype(float)
    expected = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi) for pi, ti in zip(p, t)) / 50
    assert abs(T.bce_loss(T.Tensor(p), t).item() - expected) <= 1e-12


def test_bce_rejects_non_binary_targets():
    with pytest.raises(LabelError):
        T.bce_loss(T.Tensor([0.5]), np.array([0.3]))


def test_softmax_ce_values():
    assert math.isclose(T.softmax_cross_entropy(T.Tensor(np.zeros((2, 4))), np.array([0, 3])).item(),
                        math.log(4), rel_tol=1e-6)
    big = np.array([[1000.0, 0, 0]])
    assert T.softmax_cross_entropy(T.Tensor(big), np.array([0])).item() <= 1e-6


def test_softmax_ce_direct():
    rng = np.random.default_rng(10)
    z, y = rng.standard_normal((3, 5)), np.array([4, 0, 2])
    expected = -sum(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i])) for i in range(3)) / 3
    assert abs(T.softmax_cross_entropy(T.Tensor(z), y).item() - expected) <= 1e-10


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = rng.random(8)
    assert T.bce_loss(T.Tensor(p), (rng.random(8) < 0.5).astype(float)).item() >= 0
    z = rng.standard_normal((4, 3)) * 10
    assert T.softmax_cross_entropy(T.Tensor(z), rng.integers(0, 3, 4)).item() >= 0


def test_l1_penalty_values():
    assert T.l1_penalty(P(np.zeros(3)), 0.1).item() == 0
    assert math.isclose(T.l1_penalty(P([1.0, -2.0], np.float64), 0.1).item(), 0.3)
    with pytest.raises(ParameterError):
        T.l1_penalty(P([1.0]), -1)


# -- tape ----------------------------------------------------------------------

def test_backward_linear_and_square():
    x = P(np.arange(6.0).reshape(2, 3), np.float64)
    with T.Tape() as tape:
        loss = T.sum_(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.grad = None
    with T.Tape() as tape:
        loss = T.sum_(T.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_needs_scalar_from_this_tape():
    x = P(np.ones(3))
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(UsageError):
        tape.backward(y)
    with T.Tape() as other:
        z = T.sum_(x)
    with pytest.raises(UsageError):
        tape.backward(z)
    other.backward(z)


def test_no_recording_without_tape_or_grad():
    with T.Tape() as tape:
        T.relu(T.Tensor(np.ones(3)))
    assert len(tape) == 0
    out = T.relu(P(np.ones(3)))
    assert not out.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NumericalError):
        T.mul(T.Tensor([np.float32(3e38)]), T.Tensor([np.float32(10.0)]))


@pytest.mark.parametrize("kind", gradcheck.OPS)
def test_op_gradients_match_finite_differences(kind):
    for seed in range(7):
        assert gradcheck.check_op(kind, seed) <= 1e-4, (kind, seed)


@pytest.mark.parametrize("kind", ["cnn", "vanilla"])
def test_detector_gradients_match_finite_differences(kind):
    assert gradcheck.check_model(kind, 0) <= 1e-4


# -- adam ----------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = P([1.0, -2.0], np.float64)
    p.grad = np.zeros(2)
    T.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_adam_first_step_magnitude():
    rng = np.random.default_rng(11)
    p = P(np.zeros(10), np.float64)
    g = rng.standard_normal(10)
    p.grad = g.copy()
    T.adam_step([p], lr=0.01)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-6)


def test_adam_converges_on_quadratic():
    w = P([0.0], np.float64)
    for _ in range(200):
        with T.Tape() as tape:
            d = T.add(w, T.Tensor([-3.0]))
            loss = T.sum_(T.mul(d, d))
        tape.backward(loss)
        T.adam_step([w], lr=0.1)
    assert abs(w.data[0] - 3) < 0.1


def test_adam_without_gradients_is_usage_error():
    with pytest.raises(UsageError):
        T.adam_step([P([1.0])])
