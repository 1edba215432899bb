"""Engine tests: finite-difference gradient oracles per layer, hand-computed
loss values, SGD update arithmetic, and graph bookkeeping."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradient
from poisonbench import nn
from poisonbench import tensor as T
from poisonbench.errors import NumericError, ShapeError

F64 = np.float64


def _t(rng, shape, requires_grad=True, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape).astype(F64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# finite-difference gradient checks (double precision)
# ---------------------------------------------------------------------------


def test_grad_linear(rng):
    x = _t(rng, (4, 7))
    w = _t(rng, (7, 3))
    b = _t(rng, (3,))
    check_gradient(lambda: T.linear(x, w, b), [x, w, b])


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 0), (2, 1)])
def test_grad_conv2d(rng, stride, padding):
    x = _t(rng, (2, 3, 8, 8))
    w = _t(rng, (4, 3, 3, 3))
    check_gradient(lambda: T.conv2d(x, w, stride=stride, padding=padding), [x, w])


def test_grad_relu_away_from_kink(rng):
    # probe magnitudes stay well clear of the kink at 0
    data = rng.uniform(0.2, 1.5, size=(5, 9)) * rng.choice([-1.0, 1.0], size=(5, 9))
    x = T.Tensor(data, requires_grad=True)
    check_gradient(lambda: T.relu(x), [x])


def test_grad_max_pool(rng):
    x = _t(rng, (3, 2, 6, 6))
    check_gradient(lambda: T.max_pool2(x), [x])


def test_grad_global_avg_pool(rng):
    x = _t(rng, (3, 5, 4, 4))
    check_gradient(lambda: T.global_avg_pool(x), [x])


@pytest.mark.parametrize("train", [True, False])
def test_grad_batch_norm(rng, train):
    x = _t(rng, (4, 3, 5, 5))
    gamma = T.Parameter(rng.uniform(0.5, 1.5, size=3).astype(F64), name="g")
    beta = T.Parameter(rng.uniform(-0.5, 0.5, size=3).astype(F64), name="b")
    rm = rng.uniform(-0.2, 0.2, size=3)
    rv = rng.uniform(0.8, 1.2, size=3)
    check_gradient(
        lambda: T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), train=train),
        [x, gamma, beta],
    )


def test_grad_cross_entropy(rng):
    logits = _t(rng, (6, 5))
    labels = rng.integers(0, 5, size=6)
    check_gradient(lambda: T.cross_entropy(logits, labels), [logits])


def test_grad_whole_stack(rng):
    # conv -> bn -> relu -> pool -> gap -> linear, double precision
    build_rng = np.random.default_rng(7)
    conv = nn.Conv2d(3, 4, rng=build_rng, dtype=F64, name="c0")
    bn = nn.BatchNorm2d(4, dtype=F64, name="bn0")
    fc = nn.Linear(4, 3, rng=build_rng, dtype=F64, name="fc")
    x = _t(rng, (2, 3, 8, 8), lo=0.0, hi=1.0)

    def fwd():
        h = T.relu(bn(conv(x, True), True))
        h = T.max_pool2(h)
        h = T.global_avg_pool(h)
        return T.linear(h, fc.weight, fc.bias)

    check_gradient(fwd, [x, conv.weight, bn.gamma, bn.beta, fc.weight, fc.bias])


# ---------------------------------------------------------------------------
# hand-computed values
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((2, 10)))
    loss = T.cross_entropy(logits, np.array([3, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 4), dtype=np.float64)
    logits[0, 2] = 1000.0
    loss = T.cross_entropy(T.Tensor(logits), np.array([2]))
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_hand_value():
    loss = T.cross_entropy(T.Tensor(np.array([[1.0, 2.0, 3.0]])), np.array([2]))
    assert loss.item() == pytest.approx(0.40760596, abs=1e-7)


def test_cross_entropy_label_out_of_range():
    logits = T.Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.array([-1, 0]))


def test_cross_entropy_nonnegative_random(rng):
    for _ in range(50):
        logits = T.Tensor(rng.normal(0, 10, size=(4, 6)))
        labels = rng.integers(0, 6, size=4)
        assert T.cross_entropy(logits, labels).item() >= 0.0


# ---------------------------------------------------------------------------
# backward bookkeeping
# ---------------------------------------------------------------------------


def test_unused_parameter_gradient_is_zero(rng):
    x = _t(rng, (3, 4), requires_grad=False)
    used = T.Parameter(rng.standard_normal((4, 2)), name="used")
    unused = T.Parameter(rng.standard_normal((4, 2)), name="unused")
    b = T.Parameter(np.zeros(2), name="b")
    loss = T.cross_entropy(T.linear(x, used, b), np.array([0, 1, 0]))
    T.backward(loss)
    assert np.all(unused.grad == 0)
    assert np.any(used.grad != 0)


def test_linear_input_gradient_equals_weight():
    w = T.Parameter(np.array([[2.0], [-3.0], [0.5]]), name="w")
    b = T.Parameter(np.zeros(1), name="b")
    x = T.Tensor(np.array([[1.0, 1.0, 1.0]]), requires_grad=True)
    out = T.linear(x, w, b)
    loss = T.weighted_sum(out, np.ones((1, 1)))
    T.backward(loss)
    assert np.array_equal(x.grad, w.data.T)


def test_double_backward_rejected(rng):
    x = _t(rng, (2, 3))
    loss = T.cross_entropy(x, np.array([0, 1]))
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_requires_scalar(rng):
    x = _t(rng, (2, 3))
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_input_grad_only_when_requested(rng):
    w = T.Parameter(rng.standard_normal((4, 2)), name="w")
    b = T.Parameter(np.zeros(2), name="b")
    x = T.Tensor(rng.standard_normal((3, 4)))  # requires_grad False
    loss = T.cross_entropy(T.linear(x, w, b), np.array([0, 1, 1]))
    T.backward(loss)
    assert x.grad is None
    assert np.any(w.grad != 0)


def test_relu_gradient_at_zero_is_zero():
    x = T.Tensor(np.array([[0.0, -1.0, 2.0]]), requires_grad=True)
    out = T.relu(x)
    T.backward(T.weighted_sum(out, np.ones((1, 3))))
    assert np.array_equal(x.grad, np.array([[0.0, 0.0, 1.0]]))


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------


def _param(value):
    return T.Parameter(np.array([value], dtype=np.float64), name="p")


def test_sgd_plain_update():
    p = _param(1.0)
    p.grad[:] = 0.5
    T.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == pytest.approx(0.95, abs=0)


def test_sgd_momentum_two_steps():
    p = _param(0.0)
    p.grad[:] = 1.0
    T.sgd_step([p], lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-15)
    p.grad[:] = 1.0
    T.sgd_step([p], lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_weight_decay_only():
    p = _param(1.0)
    p.grad[:] = 0.0
    T.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=5e-4)
    assert p.data[0] == pytest.approx(0.99995, abs=1e-15)


def test_sgd_empty_list_noop():
    T.sgd_step([], lr=0.1, momentum=0.9, weight_decay=1e-4)


def test_sgd_lr_zero_bit_identical(rng):
    p = T.Parameter(rng.standard_normal(17).astype(np.float32), name="p")
    before = p.data.copy()
    p.grad[:] = rng.standard_normal(17).astype(np.float32)
    T.sgd_step([p], lr=0.0, momentum=0.9, weight_decay=5e-4)
    assert np.array_equal(p.data, before)


def test_sgd_nonfinite_gradient_rejected():
    p = _param(1.0)
    p.grad[:] = np.nan
    with pytest.raises(NumericError):
        T.sgd_step([p], lr=0.1)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


@given(k=st.integers(min_value=2, max_value=64), n=st.integers(min_value=1, max_value=8))
def test_uniform_logits_loss_is_ln_k(k, n):
    logits = T.Tensor(np.full((n, k), 3.25))
    labels = np.arange(n) % k
    assert T.cross_entropy(logits, labels).item() == pytest.approx(math.log(k), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31 - 1))
def test_forward_deterministic_and_finite(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.uniform(-2, 2, size=(2, 3, 4, 4)).astype(np.float32), requires_grad=True)
    w = T.Parameter(rng.standard_normal((2, 3, 3, 3)).astype(np.float32), name="w")

    def run():
        out = T.conv2d(x, w, stride=1, padding=1)
        return T.relu(out).data

    a, b = run(), run()
    assert np.array_equal(a, b)
    assert np.isfinite(a).all()


def test_precision_field(rng):
    assert T.Tensor(np.zeros(3, dtype=np.float32)).precision == "single"
    assert T.Tensor(np.zeros(3, dtype=np.float64)).precision == "double"
    assert T.Tensor([1, 2, 3]).dtype == np.float32  # ints promote to single
