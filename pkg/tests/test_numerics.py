import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blendfuse.errors import DimensionError, NumericError, ParameterError
from blendfuse.numerics import (
    Adam,
    AdamState,
    BatchNorm,
    Dropout,
    Linear,
    Parameter,
    RngState,
    RunningStats,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    dropout_forward,
    grad_check,
    linear_backward,
    linear_forward,
    log_softmax,
    make_rng,
    relative_error,
    relu,
    relu_backward,
    sigmoid,
    softmax,
    softmax_backward,
)

finite = st.floats(-30, 30, allow_nan=False)


# -- rng ---------------------------------------------------------------------


def test_same_seed_same_stream():
    a = make_rng(7, 3).random(5)
    b = RngState(7).generator(3).random(5)
    assert np.array_equal(a, b)


def test_streams_differ():
    assert not np.array_equal(make_rng(7, 1).random(5), make_rng(7, 2).random(5))
    assert not np.array_equal(make_rng(7).random(5), make_rng(8).random(5))


# -- activations -------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    assert sigmoid(0.0) == 0.5


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ParameterError):
        softmax([1.0, 2.0], tau)
    with pytest.raises(ParameterError):
        log_softmax([1.0, 2.0], tau)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 5.0), finite)
def test_softmax_simplex_and_shift_invariance(x, tau, c):
    y = softmax(x, tau)
    assert np.all(y >= 0)
    assert abs(y.sum() - 1) < 1e-9
    assert np.allclose(softmax(x + c, tau), y, atol=1e-12)
    assert np.allclose(np.exp(log_softmax(x, tau)), y, atol=1e-12)


@given(arrays(np.float64, st.integers(2, 10), elements=finite), st.floats(0.05, 5.0), st.floats(0.05, 5.0))
def test_lower_temperature_is_sharper(x, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert softmax(x, lo).max() >= softmax(x, hi).max() - 1e-12


def test_softmax_extreme_logits_stay_finite():
    y = softmax([1000.0, -1000.0, 0.0])
    assert np.all(np.isfinite(y)) and y[0] == 1.0


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-800, 800)))
def test_sigmoid_bounds(x):
    y = sigmoid(x)
    assert np.all((y >= 0) & (y <= 1))


def test_relu_and_backward():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert np.array_equal(relu(x), [[0.0, 0.0, 2.0]])
    assert np.array_equal(relu_backward(np.ones_like(x), x), [[0.0, 0.0, 1.0]])


def test_softmax_backward_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    r = rng.normal(size=(3, 5))
    tau = 0.7
    y = softmax(x, tau)
    an = softmax_backward(r, y, tau)
    num = np.zeros_like(x)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = ((softmax(xp, tau) * r).sum() - (softmax(xm, tau) * r).sum()) / (2 * h)
    assert relative_error(an, num).max() < 1e-6


# -- linear ------------------------------------------------------------------


def test_linear_examples():
    W, b = Parameter(np.eye(2)), Parameter(np.zeros((1, 2)))
    assert np.array_equal(linear_forward([[1.0, 2.0]], W, b), [[1.0, 2.0]])
    W, b = Parameter([[2.0], [3.0]]), Parameter([[1.0]])
    assert np.array_equal(linear_forward([[1.0, 1.0]], W, b), [[6.0]])


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 3)), Parameter(np.ones((2, 2))), Parameter(np.zeros((1, 2))))
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 2)), Parameter(np.ones((2, 2))), Parameter(np.zeros((1, 3))))


def test_linear_backward_fd_3x4():
    rng = np.random.default_rng(1)
    x = Parameter(rng.normal(size=(3, 4)), "x")
    W = Parameter(rng.normal(size=(4, 2)), "W")
    b = Parameter(rng.normal(size=(1, 2)), "b")
    r = rng.normal(size=(3, 2))

    def fn():
        y = linear_forward(x.value, W, b)
        x.grad += linear_backward(r, x.value, W, b)
        return float((y * r).sum())

    assert grad_check(fn, [x, W, b]) < 1e-6


# -- batch norm --------------------------------------------------------------


def _bn(dim):
    return Parameter(np.ones((1, dim))), Parameter(np.zeros((1, dim))), RunningStats.zeros(dim)


def test_bn_constant_column():
    g, b, s = _bn(2)
    g.value[...] = [[2.0, 3.0]]
    b.value[...] = [[0.5, -1.0]]
    x = np.array([[4.0, 1.0], [4.0, 2.0], [4.0, 3.0]])
    y, _ = batchnorm_forward(x, g, b, s, "train")
    assert np.allclose(y[:, 0], 0.5)


def test_bn_standardized_input_nearly_unchanged():
    x = np.array([[-1.0], [1.0]])  # mean 0, population variance 1
    g, b, s = _bn(1)
    y, _ = batchnorm_forward(x, g, b, s, "train")
    assert np.allclose(y, x, atol=1e-5)


def test_bn_needs_two_rows():
    g, b, s = _bn(3)
    with pytest.raises(ParameterError):
        batchnorm_forward(np.ones((1, 3)), g, b, s, "train")
    y, _ = batchnorm_forward(np.ones((1, 3)), g, b, s, "eval")
    assert y.shape == (1, 3)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, size=(50, 4))
    g, b, s = _bn(4)
    batchnorm_forward(x, g, b, s, "train")
    assert np.allclose(s.mean, 0.1 * x.mean(axis=0))
    assert np.allclose(s.var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    y, _ = batchnorm_forward(x, g, b, s, "eval")
    assert np.allclose(y, (x - s.mean) / np.sqrt(s.var + 1e-5))


@pytest.mark.parametrize("stats_rows", [None, 4])
def test_bn_backward_fd(stats_rows):
    rng = np.random.default_rng(3)
    x = Parameter(rng.normal(size=(6, 3)), "x")
    g = Parameter(rng.normal(size=(1, 3)), "gamma")
    b = Parameter(rng.normal(size=(1, 3)), "beta")
    r = rng.normal(size=(6, 3))

    def fn():
        y, cache = batchnorm_forward(x.value, g, b, RunningStats.zeros(3), "train", stats_rows=stats_rows)
        x.grad += batchnorm_backward(r, cache, g, b)
        return float((y * r).sum())

    assert grad_check(fn, [x, g, b]) < 1e-5


def test_bn_stats_rows_ignore_trailing_rows():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 2))
    extra = np.vstack([x, rng.normal(10, 5, size=(3, 2))])
    g, b, s1 = _bn(2)
    s2 = RunningStats.zeros(2)
    y1, _ = batchnorm_forward(x, g, b, s1, "train")
    y2, _ = batchnorm_forward(extra, g, b, s2, "train", stats_rows=5)
    assert np.array_equal(y1, y2[:5])
    assert np.array_equal(s1.mean, s2.mean) and np.array_equal(s1.var, s2.var)


def test_bn_wrapper_modes():
    bn = BatchNorm(3)
    with pytest.raises(ParameterError):
        bn.forward(np.ones((2, 3)), "test")


# -- dropout -----------------------------------------------------------------


def test_dropout_identities():
    x = np.arange(6.0).reshape(2, 3)
    y, m = dropout_forward(x, 0.0, make_rng(0), "train")
    assert np.array_equal(y, x) and np.array_equal(m, np.ones_like(x))
    y, _ = dropout_forward(x, 0.33, None, "eval")
    assert np.array_equal(y, x)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_range(rate):
    with pytest.raises(ParameterError):
        dropout_forward(np.ones((2, 2)), rate, make_rng(0), "train")
    with pytest.raises(ParameterError):
        Dropout(rate)


def test_dropout_expectation():
    x = np.array([[1.0, -2.0, 3.5]])
    y, _ = dropout_forward(np.repeat(x, 100_000, axis=0), 0.33, make_rng(5), "train")
    assert np.all(np.abs(y.mean(axis=0) - x[0]) <= 0.01 * np.abs(x[0]))


def test_dropout_masks_scale():
    y, m = dropout_forward(np.ones((200, 10)), 0.25, make_rng(1), "train")
    assert set(np.unique(m)) <= {0.0, 1 / 0.75}
    assert np.array_equal(y, m)


def test_dropout_row_segments_independent_of_tail():
    d = Dropout(0.5)
    x = np.ones((6, 4))
    a = d.forward(x[:4], "train", [(make_rng(0), 4)])
    b = d.forward(x, "train", [(make_rng(0), 4), (make_rng(9), 2)])
    assert np.array_equal(a, b[:4])
    with pytest.raises(DimensionError):
        d.forward(x, "train", [(make_rng(0), 4)])


# -- adam --------------------------------------------------------------------


def test_adam_first_step_oracle():
    p = Parameter([[0.0]])
    p.grad[...] = 1.0
    st_ = AdamState.for_param(p, lr=3e-4)
    adam_step(p, st_)
    # m_hat = v_hat = 1 after bias correction
    assert p.value[0, 0] == pytest.approx(-3e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_no_decay_bit_identical():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=(3, 2)))
    before = p.value.copy()
    opt = Adam([p], lr=1e-2)
    for _ in range(3):
        opt.step()
    assert np.array_equal(p.value, before)


def test_adam_monotone_two_steps():
    p = Parameter([[1.0, -1.0]])
    opt = Adam([p], lr=0.1)
    vals = [p.value.copy()]
    for _ in range(2):
        p.grad[...] = [[2.0, -3.0]]
        opt.step()
        vals.append(p.value.copy())
    assert vals[0][0, 0] > vals[1][0, 0] > vals[2][0, 0]
    assert vals[0][0, 1] < vals[1][0, 1] < vals[2][0, 1]


def test_adam_decoupled_weight_decay():
    p = Parameter([[2.0]])
    opt = Adam([p], lr=0.1, weight_decay=0.5)
    opt.step()  # zero grad: only decay acts
    assert p.value[0, 0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_nonfinite_aborts_whole_step():
    a, b = Parameter([[1.0]], "a"), Parameter([[1.0]], "b")
    opt = Adam([a, b], lr=0.1)
    a.grad[...] = 1.0
    b.grad[...] = np.nan
    with pytest.raises(NumericError):
        opt.step()
    assert a.value[0, 0] == 1.0 and opt.states[0].step_count == 0


# -- grad check --------------------------------------------------------------


def test_grad_check_quadratic():
    p = Parameter(np.random.default_rng(0).normal(size=(3, 3)))

    def fn():
        p.grad += 2 * p.value
        return float((p.value**2).sum())

    assert grad_check(fn, [p]) < 1e-9


def test_grad_check_detects_wrong_gradient():
    p = Parameter([[1.0, 2.0]])

    def fn():
        p.grad += 3 * p.value  # wrong: should be 2p
        return float((p.value**2).sum())

    assert grad_check(fn, [p]) > 0.1


def test_grad_check_mlp_softmax_ce_stack():
    rng = make_rng(3)
    x = np.random.default_rng(3).normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    l1, l2 = Linear(3, 5, rng, "l1"), Linear(5, 3, rng, "l2")
    params = l1.parameters() + l2.parameters()

    def fn():
        a = l1.forward(x)
        z = l2.forward(relu(a))
        lp = log_softmax(z)
        loss = -lp[np.arange(4), labels].mean()
        dz = softmax(z)
        dz[np.arange(4), labels] -= 1
        dz /= 4
        l1.backward(relu_backward(l2.backward(dz), a))
        return float(loss)

    assert grad_check(fn, params) < 1e-5


def test_parameter_must_be_2d():
    with pytest.raises(DimensionError):
        Parameter(np.ones(3))
