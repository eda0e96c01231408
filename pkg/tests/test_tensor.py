import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedpt import tensor as T
from fedpt.errors import DataError, DimensionError, NumericError, UsageError
from fedpt.memory import AllocationTracker

from checks import op_gradchecks

TOL = 1e-4
OP_ERRORS = op_gradchecks()


def _leaf(a):
    return T.Tensor(np.array(a, dtype=np.float64), requires_grad=True)


rng = np.random.default_rng(0)


# --- forward examples -----------------------------------------------------


def test_affine_identity_and_ones():
    x = T.Tensor([[1.0, 2.0]])
    assert T.affine(x, T.Tensor(np.eye(2)), T.Tensor([0.0, 0.0])).data.tolist() == [[1.0, 2.0]]
    assert T.affine(x, T.Tensor(np.ones((2, 2))), T.Tensor([1.0, 1.0])).data.tolist() == [[4.0, 4.0]]


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        T.affine(T.Tensor(np.ones((1, 3))), T.Tensor(np.ones((2, 2))), T.Tensor(np.ones(2)))


def test_conv_identity_kernel_and_zero_kernel():
    x = T.Tensor(rng.standard_normal((2, 6, 6, 1)))
    out = T.conv2d(x, T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x.data)
    const = T.conv2d(x, T.Tensor(np.zeros((3, 3, 1, 4))), T.Tensor(np.full(4, 2.5)))
    assert np.all(const.data == 2.5)


def test_conv_output_shape_and_channel_mismatch():
    out = T.conv2d(T.Tensor(np.zeros((1, 28, 28, 1))), T.Tensor(np.zeros((5, 5, 1, 32))), T.Tensor(np.zeros(32)))
    assert out.shape == (1, 28, 28, 32)
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.zeros((1, 8, 8, 2))), T.Tensor(np.zeros((3, 3, 1, 4))), T.Tensor(np.zeros(4)))


def test_conv_matches_direct_loop():
    x = rng.standard_normal((1, 5, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 4, 3))
    for i in range(5):
        for j in range(4):
            for o in range(3):
                ref[0, i, j, o] = np.sum(xp[0, i : i + 3, j : j + 3, :] * k[:, :, :, o]) + b[o]
    got = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b)).data
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_maxpool_values_and_shape():
    x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert T.maxpool2d(x).data.ravel().tolist() == [4.0]
    assert np.all(T.maxpool2d(T.Tensor(np.full((1, 4, 4, 2), 3.0))).data == 3.0)
    assert T.maxpool2d(T.Tensor(np.zeros((1, 28, 28, 32)))).shape == (1, 14, 14, 32)
    with pytest.raises(DimensionError):
        T.maxpool2d(T.Tensor(np.zeros((1, 3, 4, 1))))


def test_maxpool_tie_routes_to_first_element():
    x = _leaf(np.full((1, 2, 2, 1), 5.0))
    g = T.backward(T.tsum(T.maxpool2d(x)))[x]
    assert g.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_group_norm_constant_input_gives_shift():
    x = T.Tensor(np.full((2, 3, 3, 4), 7.0))
    out = T.group_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), groups=2)
    assert np.all(out.data == 0.0)
    out = T.group_norm(x, T.Tensor(np.ones(4)), T.Tensor([1.0, 2.0, 3.0, 4.0]), groups=2)
    np.testing.assert_array_equal(out.data[0, 0, 0], [1.0, 2.0, 3.0, 4.0])


def test_group_norm_moments():
    x = rng.standard_normal((3, 5, 5, 8)) * 4 + 2
    out = T.group_norm(T.Tensor(x), T.Tensor(np.ones(8)), T.Tensor(np.zeros(8)), groups=4).data
    g = out.reshape(3, 25, 4, 2)
    np.testing.assert_allclose(g.mean(axis=(1, 3)), 0.0, atol=1e-10)
    # eps shrinks the variance slightly below 1
    np.testing.assert_allclose(g.var(axis=(1, 3)), 1.0, atol=1e-5)


def test_group_norm_bad_groups():
    with pytest.raises(DimensionError):
        T.group_norm(T.Tensor(np.zeros((1, 2, 2, 6))), T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)), groups=4)


def test_cross_entropy_uniform_and_confident():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((3, 62))), [0, 5, 61])
    assert math.isclose(float(loss.data), math.log(62), rel_tol=1e-6)
    logits = np.zeros((1, 4))
    logits[0, 2] = 100.0
    assert float(T.softmax_cross_entropy(T.Tensor(logits), [2]).data) < 1e-30


def test_cross_entropy_label_range():
    with pytest.raises(DataError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])


# --- backward -------------------------------------------------------------


def test_sum_gradient_is_ones():
    x = _leaf(rng.standard_normal((2, 3)))
    assert np.array_equal(T.backward(T.tsum(x))[x], np.ones((2, 3)))


def test_identity_chain_passes_upstream_gradient():
    x = _leaf(rng.standard_normal((2, 6)))
    y = T.reshape(T.reshape(x, (3, 4)), (2, 6))
    assert np.array_equal(T.backward(T.tsum(y))[x], np.ones((2, 6)))


def test_backward_rejects_non_scalar():
    with pytest.raises(UsageError):
        T.backward(_leaf(np.ones(3)))


def test_frozen_leaves_get_no_gradient():
    x = T.Tensor(rng.standard_normal((4, 3)))
    w = T.Tensor(rng.standard_normal((3, 2)))  # frozen
    b = _leaf(np.zeros(2))
    grads = T.backward(T.softmax_cross_entropy(T.affine(x, w, b), [0, 1, 1, 0]))
    assert set(grads) == {b}


def test_frozen_weight_drops_saved_input():
    x = T.Tensor(rng.standard_normal((4, 3)))
    h = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    out_frozen = T.affine(h, T.Tensor(np.ones((3, 2))), T.Tensor(np.zeros(2)))
    assert out_frozen.node.saved["x"] is None
    out_train = T.affine(x, _leaf(np.ones((3, 2))), T.Tensor(np.zeros(2)))
    assert out_train.node.saved["x"] is not None
    no_tape = T.affine(x, T.Tensor(np.ones((3, 2))), T.Tensor(np.zeros(2)))
    assert no_tape.node is None


@pytest.mark.filterwarnings("ignore:overflow")
def test_nan_is_an_error():
    with pytest.raises(NumericError):
        T.Tensor([1.0, float("nan")])
    with pytest.raises(NumericError):
        T.affine(T.Tensor([[1e38]]), T.Tensor([[1e38]]), T.Tensor([0.0]))


def test_forward_is_deterministic():
    x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(np.zeros(4, np.float32))).data
    b = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(np.zeros(4, np.float32))).data
    assert a.tobytes() == b.tobytes()


def test_float32_default_and_float64_mode():
    assert T.Tensor([1.0]).dtype == np.float32
    with T.float64_mode():
        assert T.Tensor([1.0]).dtype == np.float64


def test_allocation_tracker_counts_and_releases():
    with AllocationTracker() as tr:
        a = T.Tensor(np.zeros(1000, dtype=np.float32))
        assert tr.live == 4000
        del a
        assert tr.live == 0
    assert tr.peak == 4000


# --- finite-difference checks (64-bit, step 1e-5) ---------------------------


@pytest.mark.parametrize("op", ["affine", "conv2d", "maxpool2d", "group_norm", "relu", "softmax_cross_entropy"])
def test_op_gradients(op):
    assert OP_ERRORS[op] < TOL


@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_cross_entropy_gradient_is_softmax_minus_onehot(logits, labels):
    z = _leaf(logits)
    g = T.backward(T.softmax_cross_entropy(z, labels))[z]
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(3), labels] -= 1
    np.testing.assert_allclose(g, p / 3, atol=1e-12)
