import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from chanmap.quant import (
    WeightQuantizer,
    activation_codes,
    affine_scale,
    quantize_activation_array,
    quantize_affine,
    quantize_affine_array,
    quantize_ternary,
    quantize_ternary_array,
)
from chanmap.tensor import Tensor
from oracles import STE_CASES, ste_gradcheck


def ternary_loop(row, t=0.05):
    """Scalar re-evaluation of the threshold/mean rule for one channel."""
    row = [float(v) for v in row]
    cut = t * max(abs(v) for v in row)
    kept = [abs(v) for v in row if abs(v) > cut]
    s = sum(kept) / len(kept) if kept else 0.0
    return [(s if v > 0 else -s) if abs(v) > cut else 0.0 for v in row]


def test_ternary_zero_channel():
    np.testing.assert_array_equal(quantize_ternary_array(np.zeros((1, 3))), np.zeros((1, 3)))


def test_ternary_symmetric_channel():
    np.testing.assert_array_equal(quantize_ternary_array(np.array([[1.0, -1.0, 1.0, -1.0]])), [[1, -1, 1, -1]])


def test_ternary_matches_scalar_loop(rng):
    for _ in range(20):
        w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        got = quantize_ternary_array(w)
        for c in range(4):
            ref = np.asarray(ternary_loop(w[c].ravel()), dtype=np.float32)
            np.testing.assert_array_equal(got[c].ravel(), ref)


def test_ternary_values_per_channel(rng):
    w = rng.standard_normal((5, 7)).astype(np.float32)
    q = quantize_ternary_array(w)
    for c in range(5):
        s = np.abs(q[c]).max()
        assert set(np.unique(q[c])) <= {-s, 0.0, s}


def test_affine_zero():
    np.testing.assert_array_equal(quantize_affine_array(np.zeros((1, 1)), 5), [[0.0]])


def test_affine_half_rounds_to_level_64():
    q = quantize_affine_array(np.array([[1.0, -1.0, 0.5]]), 8)
    # oracle: scale 1/127, 0.5*127 = 63.5 rounds (half to even) to 64 -> 64/127
    np.testing.assert_allclose(q, [[1.0, -1.0, 0.50393701]], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (3, 6), elements=st.floats(-10, 10, width=32)), st.integers(2, 8))
def test_affine_idempotent_and_bounded(w, bits):
    q = quantize_affine_array(w, bits)
    np.testing.assert_array_equal(quantize_affine_array(q, bits), q)
    half = affine_scale(w, bits) / 2
    assert np.all(np.abs(q) <= np.abs(w).max(axis=1, keepdims=True) + half[:, None] + 1e-6)
    assert all(len(np.unique(q[c])) <= 2**bits for c in range(3))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (1, 8), elements=st.floats(-4, 4, width=32), unique=True))
def test_quantizers_monotone(w):
    order = np.argsort(w[0])
    for q in (quantize_affine_array(w, 4), quantize_ternary_array(w)):
        assert np.all(np.diff(q[0][order]) >= 0)


@pytest.mark.parametrize("name", sorted(STE_CASES))
def test_straight_through_gradient(name, rng):
    assert ste_gradcheck(STE_CASES[name], rng.uniform(-1, 1, (3, 2, 3, 3))) < 1e-3
    x = Tensor(rng.uniform(-1, 1, (2, 5)), requires_grad=True)
    STE_CASES[name](x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 5)))


def test_ste_contract_direct():
    for fn in (quantize_ternary, lambda t: quantize_affine(t, 3)):
        x = Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
        fn(x).sum().backward()
        np.testing.assert_array_equal(x.grad, 1.0)


def test_non_finite_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        quantize_affine_array(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError, match="bit-width"):
        quantize_affine_array(np.ones((1, 2)), 9)


def test_activation_quantization():
    x = np.array([[-2.0, 0.3, 1.0]], np.float32)
    codes, scale = activation_codes(x, 8)
    assert scale == pytest.approx(2.0 / 127)
    np.testing.assert_array_equal(codes, [[-127, 19, 64]])
    np.testing.assert_allclose(quantize_activation_array(x), codes * scale, rtol=1e-6)
    assert activation_codes(np.zeros(3), 8)[1] == 0.0


def test_weight_quantizer_freeze_and_permute(rng):
    w = rng.standard_normal((4, 3)).astype(np.float32)
    q = WeightQuantizer("ternary")
    q.freeze(w)
    frozen = q.array(w)
    # frozen scales ignore later weight changes
    np.testing.assert_array_equal(q.params(w * 3)["scale"], q.frozen["scale"])
    perm = np.array([2, 0, 3, 1])
    q.permute(perm)
    np.testing.assert_array_equal(q.array(w[perm]), frozen[perm])
    codes, scale = q.codes(w[perm])
    np.testing.assert_allclose(codes * scale[:, None], frozen[perm], rtol=1e-6)
    assert codes.dtype == np.int8


def test_float_quantizer_is_identity(rng):
    w = Tensor(rng.standard_normal((2, 2)))
    assert WeightQuantizer("float")(w) is w
    assert WeightQuantizer("float").codes(w.data)[1] is None
    with pytest.raises(ValueError):
        WeightQuantizer("int16")
