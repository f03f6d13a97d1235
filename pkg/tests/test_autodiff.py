"""Tensor engine: finite-difference gradients, examples, tape contract."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import fdcheck
from mbbr import autodiff as ad
from mbbr.errors import DimensionError, NumericError, TapeStateError

CASES = fdcheck.op_cases(seed=0)


@pytest.mark.parametrize("name,build,tensors", CASES, ids=[c[0] for c in CASES])
def test_operation_gradient_matches_finite_differences(name, build, tensors):
    assert fdcheck.check(build, tensors) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_gradient_any_shape(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = ad.parameter(rng.standard_normal((n, k))), ad.parameter(rng.standard_normal((k, m)))
    assert fdcheck.check(lambda: fdcheck.weighted_sum(ad.matmul(a, b)), [a, b]) < 1e-6


def test_softmax_example():
    s = ad.softmax(ad.Tensor([1.0, 2.0, 3.0])).data
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(s, e / e.sum(), rtol=1e-14)


def test_softmax_is_shift_stable():
    s = ad.softmax(ad.Tensor([1000.0, 1001.0, 1002.0])).data
    np.testing.assert_allclose(s, ad.softmax(ad.Tensor([0.0, 1.0, 2.0])).data, rtol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((2, 4)))
    mask = np.array([[True, False, True, True], [False, False, True, False]])
    s = ad.softmax(x, mask=mask).data
    assert np.all(s[~mask] == 0.0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=1e-14)
    assert s[1, 2] == 1.0


def test_layer_norm_standardises_last_axis():
    x = ad.Tensor(np.random.default_rng(1).standard_normal((3, 16)) * 5 + 2)
    out = ad.layer_norm(x, ad.Tensor(np.ones(16)), ad.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    # eps = 1e-5 shrinks the variance very slightly below one
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)


def test_layer_norm_rejects_wrong_affine_shape():
    with pytest.raises(DimensionError):
        ad.layer_norm(ad.Tensor(np.zeros((2, 4))), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)))


def test_mse_example():
    assert ad.mse_loss(ad.Tensor([1.0, 2.0]), np.zeros(2)).item() == pytest.approx(2.5)


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mse_loss(ad.Tensor(np.zeros(3)), np.zeros(4))


def test_cross_entropy_uniform_logits_is_log_k():
    loss = ad.cross_entropy(ad.Tensor(np.zeros((4, 7))), [0, 3, 6, 2]).item()
    assert loss == pytest.approx(math.log(7), rel=1e-14)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.Tensor(np.zeros((2, 3))), [0, 3])


def test_gradient_accumulates_over_reuse():
    x = ad.parameter([3.0])
    ad.backward(ad.tsum(x * x + x))
    assert x.grad[0] == pytest.approx(7.0)


def test_backward_twice_raises_then_reset_allows():
    x = ad.parameter([2.0, -1.0])
    loss = ad.tsum(x * x)
    ad.backward(loss)
    first = x.grad.copy()
    with pytest.raises(TapeStateError):
        ad.backward(loss)
    ad.reset(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.parameter([1.0, 2.0]) * 2.0)


def test_tape_orders_parents_first():
    x = ad.parameter([1.0])
    y = ad.exp(x)
    z = ad.tsum(y * x)
    tape = ad.backward(z)
    pos = tape.index
    assert pos[id(x)] < pos[id(y)] < pos[id(z)]
    assert all(n.grad is not None for n in tape.nodes)


def test_no_grad_builds_no_graph():
    x = ad.parameter([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_values_rejected_in_f64_mode():
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        ad.log(ad.Tensor([0.0]))


def test_f32_mode_uses_float32():
    with ad.precision("f32"):
        t = ad.Tensor([1.0, 2.0]) * 3.0
        assert t.data.dtype == np.float32
    assert ad.get_dtype() == np.float64


def test_unknown_precision():
    with pytest.raises(ValueError):
        ad.set_precision("f16")


def test_repeated_computation_is_bit_identical():
    def run():
        build, tensors = fdcheck.pipeline_case(seed=5)
        loss = build()
        ad.backward(loss)
        return loss.item(), [t.grad.copy() for t in tensors if t.grad is not None]
    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))
