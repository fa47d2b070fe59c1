import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from chanmap import functional as F
from chanmap.tensor import GraphError, Tensor, concat, cross_entropy, make_rng, no_grad, relu, softmax
from oracles import GRAD_CASES, gradcheck, numeric_grad, rel_error


def test_conv_of_ones_is_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_relu_definition():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_cross_entropy_uniform_logits():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-6)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_conv_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 3, 5, 5))
    w = rng.uniform(-1, 1, (4, 3, 3, 3))
    assert gradcheck(lambda a, b: F.conv2d(a, b, None, 1, 1), [x, w]) < 1e-3


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients(name):
    for seed in range(3):
        assert gradcheck(*GRAD_CASES[name](np.random.default_rng(seed)), seed=seed) < 1e-3


def test_numeric_grad_oracle_on_polynomial():
    # sanity of the oracle itself: d/dx (x^3) = 3x^2
    x = np.array([0.5, -1.0, 2.0])
    (g,) = numeric_grad(lambda: float((x**3).sum()), [x], 1e-4)
    np.testing.assert_allclose(g, 3 * x**2, rtol=1e-6)
    assert rel_error([1.0, 0.0], [1.0, 0.0]) == 0.0


def test_backward_errors():
    with pytest.raises(GraphError, match="scalar"):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()
    with pytest.raises(GraphError, match="not attached"):
        Tensor(1.0).backward()
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    y.backward()
    with pytest.raises(GraphError, match="consumed"):
        y.backward()


def test_gradients_accumulate_over_shared_parents():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize(
    "call, match",
    [
        (lambda: F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3)))), "input channels"),
        (lambda: F.conv2d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((4, 2, 3, 3))), groups=3), "groups"),
        (lambda: F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3)))), "larger"),
        (lambda: F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))), "linear"),
        (lambda: concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=1), "concat"),
    ],
)
def test_shape_errors_name_the_operator(call, match):
    with pytest.raises(ValueError, match=match):
        call()


def test_batchnorm_running_statistics():
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)).astype(np.float32)
    mean, var = np.zeros(2, np.float32), np.ones(2, np.float32)
    F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-5)
    before = mean.copy()
    F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=False)
    np.testing.assert_array_equal(mean, before)


def test_depthwise_matches_per_channel_convolution(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    got = F.conv2d_array(x, w, 2, 1, groups=3)
    for c in range(3):
        ref = F.conv2d_array(x[:, c : c + 1], w[c : c + 1], 2, 1)
        np.testing.assert_allclose(got[:, c : c + 1], ref, atol=1e-6)


def test_determinism():
    def run():
        rng = make_rng(7)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        out = softmax(F.conv2d(x, w, None, 1, 1).mean(axis=(2, 3)))
        (out * out).sum().backward()
        return out.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


small = hnp.arrays(np.float32, (2, 2, 4, 4), elements=st.floats(-1, 1, width=32))


@settings(max_examples=30, deadline=None)
@given(small, small, st.floats(-2, 2), st.floats(-2, 2))
def test_conv_linearity(x, z, a, b):
    w = np.linspace(-1, 1, 3 * 2 * 9, dtype=np.float32).reshape(3, 2, 3, 3)
    lhs = F.conv2d_array(a * x + b * z, w, 1, 1)
    rhs = a * F.conv2d_array(x, w, 1, 1) + b * F.conv2d_array(z, w, 1, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * (1 + abs(a) + abs(b)) * 18)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, (3, 4), elements=st.floats(-5, 5, width=32)))
def test_gradients_finite(x):
    t = Tensor(x, requires_grad=True)
    cross_entropy(relu(t) * 2.0 - t, [0, 1, 2]).backward()
    assert t.grad.shape == x.shape and np.all(np.isfinite(t.grad))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, (2, 5), elements=st.floats(-30, 30, width=32)))
def test_softmax_rows_sum_to_one(x):
    p = softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(p >= 0)
