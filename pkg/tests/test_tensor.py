"""Reverse-mode tape: gradients against central differences, optimizer math."""

import numpy as np
import pytest

from jetvit.errors import ContractError, DimensionError, NumericError
from jetvit import tensor as T
from jetvit.rng import Rng
from jetvit.tensor import AdamState, GradTape, Tensor, adam_step, grad_check


def test_square_gradient():
    x = Tensor(np.array([3.0]))
    with GradTape() as tape:
        tape.watch(x)
        loss = (x * x).sum()
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_unwatched_leaf_gets_no_grad():
    x = Tensor(np.array([2.0]))
    y = Tensor(np.array([5.0]))
    with GradTape() as tape:
        tape.watch(x)
        loss = (x * y).sum()
        tape.backward(loss)
    assert y.grad is None
    np.testing.assert_allclose(x.grad, [5.0])


def test_broadcast_add_unbroadcasts_grad():
    a = Tensor(np.ones((3, 4)))
    b = Tensor(np.ones((4,)))
    with GradTape() as tape:
        tape.watch(a, b)
        loss = (a + b).sum()
        tape.backward(loss)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0)


def test_composite_matches_finite_differences():
    rng = Rng(0)
    w = Tensor(rng.normal((5, 4)))
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    x = Tensor(rng.normal((3, 5)))
    # Random cotangent: a plain .sum() of layer_norm output is identically
    # zero, which would turn the check into a comparison of rounding noise.
    c = Tensor(rng.normal((3, 4)))

    def f(w, g, b):
        h = T.silu(x @ w)
        return (T.layer_norm(h, g, b) * c).sum()

    assert grad_check(f, [w, g, b]) < 1e-5


def test_softmax_and_cross_entropy_grads():
    rng = Rng(1)
    logits = Tensor(rng.normal((4, 3)))
    labels = np.array([0, 2, 1, 1])

    def f(z):
        return T.cross_entropy(z, labels)

    assert grad_check(f, [logits]) < 1e-6


def test_narrow_concat_roundtrip_grad():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))

    def f(x):
        left = T.narrow(x, 1, 0, 2)
        right = T.narrow(x, 1, 2, 2)
        return (T.concat([right, left], axis=1) * 2.0).sum()

    assert grad_check(f, [x]) < 1e-8


def test_depthwise_conv_grad():
    rng = Rng(2)
    x = Tensor(rng.normal((1, 9, 2)))
    k = Tensor(rng.normal((1, 2, 3, 3)))

    def f(x, k):
        return (T.depthwise_conv2d(x, k, (3, 3)) ** 2).sum()

    assert grad_check(f, [x, k]) < 1e-5


def test_backward_requires_scalar_from_this_tape():
    x = Tensor(np.ones(3))
    with GradTape() as tape:
        tape.watch(x)
        y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)
    out = x * 1.0
    with pytest.raises(ContractError):
        GradTape().backward(out.sum())


def test_tensor_rejects_nonfinite_coerces_ints():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.nan]))
    assert Tensor(np.array([1, 2])).dtype == np.float64


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([1.0, -2.0]))
    before = p.data.copy()
    st = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], st, lr=0.1)
    np.testing.assert_array_equal(p.data, before)
    assert st.t == 1


def test_adam_first_step_formula():
    # With constant grad g, the bias-corrected first step is exactly
    # lr * g / (|g| + eps) in each coordinate.
    p = Tensor(np.array([0.0, 0.0]))
    g = np.array([0.5, -3.0])
    adam_step([p], [g], AdamState.for_params([p]), lr=0.01)
    expect = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-6)


def test_adam_shared_param_updates_once():
    p = Tensor(np.zeros(2))
    st = AdamState.for_params([p])
    adam_step([p], [np.ones(2)], st, lr=0.1)
    moved = p.data.copy()
    assert np.abs(moved).max() > 0


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2))
    with pytest.raises(DimensionError):
        adam_step([p], [np.zeros(3)], AdamState.for_params([p]))


def test_grad_check_rejects_f32():
    p = Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(ContractError):
        grad_check(lambda t: t.sum(), [p])


def test_matmul_shape_guard():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(DimensionError):
        _ = a @ b
