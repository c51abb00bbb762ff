import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pulsegate import nncore as nn
from pulsegate.errors import DegenerateBatch, KernelTooLarge, ShapeMismatch

from gradcases import CASES

F64 = np.float64


def block(name, value):
    return nn.ParamBlock(name, np.asarray(value, dtype=F64))


# -- dense ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "x,W,b,act,expected",
    [
        ([1, 2], np.eye(2), [0, 0], "linear", [1, 2]),
        ([-1, 2], np.eye(2), [0, 0], "relu", [0, 2]),
        ([0], [[1]], [0], "sigmoid", [0.5]),
    ],
)
def test_dense_forward_examples(x, W, b, act, expected):
    y, _ = nn.dense_forward(np.asarray(x, F64), block("W", W), block("b", b), act)
    assert np.allclose(y[0], expected)


def test_dense_backward_scalar():
    W, b = block("W", [[2.0]]), block("b", [0.0])
    _, ctx = nn.dense_forward(np.array([[3.0]]), W, b)
    dx = nn.dense_backward(ctx, np.array([[1.0]]))
    assert W.grad[0, 0] == 3 and b.grad[0] == 1 and dx[0, 0] == 2


def test_dense_relu_gate_blocks_gradient():
    W, b = block("W", [[1.0]]), block("b", [-5.0])
    _, ctx = nn.dense_forward(np.array([[0.0]]), W, b, "relu")
    dx = nn.dense_backward(ctx, np.array([[1.0]]))
    assert W.grad[0, 0] == 0 and b.grad[0] == 0 and dx[0, 0] == 0


def test_dense_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.dense_forward(np.ones((2, 3)), block("W", np.ones((2, 2))), block("b", np.zeros(2)))
    _, ctx = nn.dense_forward(np.ones((2, 2)), block("W", np.ones((2, 2))), block("b", np.zeros(2)))
    with pytest.raises(ShapeMismatch):
        nn.dense_backward(ctx, np.ones((2, 3)))


# -- gradient checks over every layer and loss ----------------------------------------------


@pytest.mark.parametrize("kind", sorted(CASES))
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(kind, seed):
    loss_fn, params = CASES[kind](seed)
    assert nn.finite_difference_check(loss_fn, params) < 1e-4


def test_lstm_gradcheck_hidden3_five_steps():
    rng = np.random.default_rng(0)
    x = block("x", rng.normal(size=(2, 5, 1)))
    Wx, Wh, b = block("Wx", rng.normal(0, 0.5, (1, 12))), block("Wh", rng.normal(0, 0.5, (3, 12))), block("b", rng.normal(0, 0.3, 12))
    R = rng.normal(size=(2, 3))

    def f():
        y, cache = nn.lstm_forward(x.value, Wx, Wh, b)
        x.grad += nn.lstm_backward(cache, R)
        return float(np.sum(y * R))

    assert nn.finite_difference_check(f, [Wx, Wh, b]) < 1e-4


def test_checker_quadratic_and_corruption():
    w = block("w", [3.0])

    def f():
        w.grad += 2 * w.value
        return float(w.value[0] ** 2)

    assert nn.finite_difference_check(f, [w]) < 1e-8

    def doubled():
        w.grad += 4 * w.value
        return float(w.value[0] ** 2)

    assert nn.finite_difference_check(doubled, [w]) == pytest.approx(0.5, abs=1e-6)


# -- lstm ---------------------------------------------------------------------------------


def test_lstm_zero_weights_zero_output():
    H = 4
    y, _ = nn.lstm_forward(np.random.default_rng(1).normal(size=(3, 12, 2)), block("Wx", np.zeros((2, 4 * H))),
                           block("Wh", np.zeros((H, 4 * H))), block("b", np.zeros(4 * H)), return_sequences=True)
    assert np.all(y == 0)


def test_lstm_hand_example():
    # gate order i, f, c, o; large positive biases saturate gates at 1
    bias = np.array([50.0, 50.0, math.atanh(0.5), 50.0])
    y, _ = nn.lstm_forward(np.zeros((1, 1, 1)), block("Wx", np.zeros((1, 4))), block("Wh", np.zeros((1, 4))), block("b", bias))
    assert y[0, 0] == pytest.approx(math.tanh(0.5), abs=1e-9)
    assert y[0, 0] == pytest.approx(0.462, abs=1e-3)


def test_lstm_last_state_shape_and_backward_contracts():
    rng = np.random.default_rng(2)
    params = [block("Wx", rng.normal(size=(1, 20))), block("Wh", rng.normal(size=(5, 20))), block("b", rng.normal(size=20))]
    x = rng.normal(size=(1, 12, 1))
    y, cache = nn.lstm_forward(x, *params)
    assert y.shape == (1, 5)
    nn.lstm_backward(cache, np.zeros_like(y))
    assert all(np.all(p.grad == 0) for p in params)

    grads = []
    for _ in range(2):
        for p in params:
            p.zero_grad()
        _, cache = nn.lstm_forward(x, *params)
        nn.lstm_backward(cache, np.ones_like(y))
        grads.append([p.grad.copy() for p in params])
    assert all(np.array_equal(a, b) for a, b in zip(*grads))
    with pytest.raises(ShapeMismatch):
        nn.lstm_forward(rng.normal(size=(1, 12, 2)), *params)


# -- conv --------------------------------------------------------------------------------


@pytest.mark.parametrize("stride,length", [(3, 4), (2, 5), (1, 10)])
def test_conv_length(stride, length):
    assert nn.conv_output_length(12, 3, stride) == length
    y, _ = nn.conv1d_forward(np.zeros((1, 12, 1)), block("W", np.zeros((3, 1, 4))), block("b", np.zeros(4)), stride)
    assert y.shape == (1, length, 4)


def test_conv_identity_and_kernel_too_large():
    x = np.arange(12, dtype=F64).reshape(1, 12, 1)
    y, _ = nn.conv1d_forward(x, block("W", np.ones((1, 1, 1))), block("b", [0.0]))
    assert np.array_equal(y, x)
    with pytest.raises(KernelTooLarge):
        nn.conv1d_forward(x, block("W", np.ones((13, 1, 1))), block("b", [0.0]))


# -- batchnorm ---------------------------------------------------------------------------


def bn_params(C, gamma=1.0):
    return block("g", np.full(C, gamma)), block("b", np.zeros(C)), np.zeros(C), np.ones(C)


def test_batchnorm_train_example_and_running_update():
    g, b, rm, rv = bn_params(1)
    y, _ = nn.batchnorm_forward(np.array([[1.0], [3.0]]), g, b, rm, rv, train=True)
    expected = 1 / math.sqrt(1.001)
    assert np.allclose(y[:, 0], [-expected, expected])
    assert rm[0] == pytest.approx(0.01 * 2) and rv[0] == pytest.approx(0.99 + 0.01 * 1)


def test_batchnorm_infer_and_gamma_zero():
    g, b, rm, rv = bn_params(2)
    x = np.array([[1.0, -2.0], [0.5, 4.0]])
    y, _ = nn.batchnorm_forward(x, g, b, rm, rv)
    assert np.allclose(y, x / math.sqrt(1.001))
    g0 = block("g", np.zeros(2))
    beta = block("b", [0.3, -0.7])
    y, _ = nn.batchnorm_forward(x, g0, beta, rm, rv, train=True)
    assert np.allclose(y, [[0.3, -0.7]] * 2)


def test_batchnorm_degenerate():
    g, b, rm, rv = bn_params(1)
    with pytest.raises(DegenerateBatch):
        nn.batchnorm_forward(np.array([[1.0]]), g, b, rm, rv, train=True)


@given(arrays(F64, st.tuples(st.integers(2, 8), st.integers(1, 4), st.integers(1, 3)),
              elements=st.floats(-100, 100)))
def test_batchnorm_normalizes(x):
    spread = x.var(axis=(0, 1))
    C = x.shape[-1]
    g, b, rm, rv = bn_params(C)
    y, _ = nn.batchnorm_forward(x, g, b, rm, rv, train=True)
    mean = y.mean(axis=(0, 1))
    var = y.var(axis=(0, 1))
    assert np.all(np.abs(mean) < 1e-9)
    assert np.allclose(var, spread / (spread + 0.001), atol=1e-6)


# -- dropout, pooling, shuffle ----------------------------------------------------------------


def test_dropout_identity_cases():
    x = np.arange(6, dtype=F64)
    assert np.array_equal(nn.dropout(x, 0.4, train=False)[0], x)
    assert np.array_equal(nn.dropout(x, 0.0, train=True, rng=np.random.default_rng(0))[0], x)
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0)


def test_dropout_monte_carlo_mean():
    y, mask = nn.dropout(np.ones(100_000), 0.4, train=True, rng=np.random.default_rng(3))
    se = y.std(ddof=1) / math.sqrt(y.size)
    assert abs(y.mean() - 1.0) < 3 * se
    assert set(np.unique(y)) <= {0.0, 1 / 0.6}


def test_global_avg_pool():
    x = np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
    assert np.array_equal(nn.global_avg_pool(x), [2.0, 5.0])
    assert np.array_equal(nn.global_avg_pool(x[:1]), x[0])
    assert np.array_equal(nn.global_avg_pool(np.full((7, 1), 2.5)), [2.5])


def test_dimension_shuffle():
    x = np.array([[1, 2], [3, 4], [5, 6]])
    assert nn.dimension_shuffle(x).tolist() == [[1, 3, 5], [2, 4, 6]]
    assert nn.dimension_shuffle(np.zeros((4, 12, 1))).shape == (4, 1, 12)


@given(arrays(F64, st.tuples(st.integers(1, 3), st.integers(1, 12), st.integers(1, 4)), elements=st.floats(-1e6, 1e6)))
def test_dimension_shuffle_involution(x):
    assert np.array_equal(nn.dimension_shuffle(nn.dimension_shuffle(x)), x)


# -- losses and softmax ------------------------------------------------------------------


def test_loss_examples():
    v, g = nn.loss("mse", np.array([[0.5]]), np.array([[0.5]]))
    assert v == 0 and g[0, 0] == 0
    v, _ = nn.loss("binary_ce", np.array([[0.5]]), np.array([[1.0]]))
    assert v == pytest.approx(math.log(2))
    v, _ = nn.loss("categorical_ce", nn.softmax(np.array([[0.0, 0.0]])), np.array([0]))
    assert v == pytest.approx(math.log(2))
    with pytest.raises(ShapeMismatch):
        nn.loss("mse", np.zeros((2, 1)), np.zeros((3, 1)))


def test_cross_entropy_clamp_is_finite():
    v, g = nn.loss("binary_ce", np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]]))
    assert math.isfinite(v) and np.all(np.isfinite(g))


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    p = nn.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300


@given(arrays(F64, st.integers(1, 10), elements=st.floats(-500, 500)), st.floats(-1000, 1000))
def test_softmax_properties(v, c):
    p = nn.softmax(v)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
    assert np.allclose(p, nn.softmax(v + c), atol=1e-12)


# -- adam -----------------------------------------------------------------------------------


def test_adam_first_step():
    b = block("w", np.full((3, 2), 0.5))
    b.grad[...] = 1.0
    nn.adam_step(b, 0.001)
    assert np.allclose(b.value, 0.5 - 0.001 / (1 + 1e-8), rtol=0, atol=1e-15)
    assert b.step_count == 1 and np.all(b.grad == 0)


def test_adam_zero_grad_and_determinism():
    b = block("w", [1.0, 2.0])
    nn.adam_step(b, 0.1)
    assert np.array_equal(b.value, [1.0, 2.0]) and b.step_count == 1
    pair = [block("a", [0.1, -0.3]), block("b", [0.1, -0.3])]
    for _ in range(3):
        for p in pair:
            p.grad[...] = [0.2, -1.5]
            nn.adam_step(p, 0.01)
    assert np.array_equal(pair[0].value, pair[1].value)


def test_param_block_shapes():
    b = nn.ParamBlock("w", np.zeros((2, 3), np.float32))
    assert b.grad.shape == b.adam_m.shape == b.adam_v.shape == (2, 3) and b.step_count == 0
    assert b.astype(F64).value.dtype == F64
