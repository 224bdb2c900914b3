import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nucleihvt import functional as F
from nucleihvt.gradcheck import grad_check
from nucleihvt.tensor import Tensor, TapeError, active_tape, concat, count_flops, no_grad, reset_tape, stack


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_add_mul_backward_matches_hand_derivative():
    reset_tape()
    a, b = t64([1.0, 2.0, 3.0]), t64([4.0, 5.0, 6.0])
    (a * b + a).sum().backward()
    np.testing.assert_array_equal(a.grad, [5.0, 6.0, 7.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0, 3.0])


def test_broadcast_gradient_is_reduced_to_input_shape():
    reset_tape()
    a = t64(np.ones((2, 3)))
    b = t64(np.ones((3,)))
    (a * b).sum().backward()
    assert b.grad.shape == (3,)
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_shared_input_accumulates_gradient():
    reset_tape()
    x = t64(3.0)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_tape_cannot_be_replayed_twice():
    reset_tape()
    x = t64(2.0)
    y = x * x
    y.backward()
    with pytest.raises(TapeError):
        y.backward()


def test_no_grad_records_nothing():
    reset_tape()
    x = t64([1.0, 2.0])
    with no_grad():
        y = (x * 2.0).sum()
    assert len(active_tape()) == 0
    with pytest.raises(TapeError):
        y.backward()


def test_count_flops_for_matmul():
    a, b = Tensor(np.ones((4, 5))), Tensor(np.ones((5, 6)))
    with no_grad(), count_flops() as total:
        a @ b
    assert total[0] == 2 * 4 * 5 * 6


def test_concat_and_stack_gradients_split_back():
    reset_tape()
    a, b = t64(np.ones((2, 2))), t64(np.ones((3, 2)))
    w = np.arange(10.0).reshape(5, 2)
    (concat([a, b], axis=0) * Tensor(w)).sum().backward()
    np.testing.assert_array_equal(a.grad, w[:2])
    np.testing.assert_array_equal(b.grad, w[2:])
    reset_tape()
    c, d = t64(np.zeros(3)), t64(np.zeros(3))
    (stack([c, d]) * Tensor(np.array([[1.0, 2, 3], [4, 5, 6]]))).sum().backward()
    np.testing.assert_array_equal(d.grad, [4.0, 5.0, 6.0])


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), padding=1, dilation=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = (xp[0, :, i : i + 5 : 2, j : j + 5 : 2] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_depthwise_conv_keeps_channels_independent(rng):
    x = rng.normal(size=(1, 3, 5, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), padding=1, groups=3).data
    for c in range(3):
        single = F.conv2d(Tensor(x[:, c : c + 1]), Tensor(w[c : c + 1]), padding=1).data
        np.testing.assert_allclose(out[:, c : c + 1], single, rtol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv_transpose(y)> for matching geometry
    x = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(3, 2, 2, 2))
    y = rng.normal(size=(1, 3, 4, 4))
    lhs = (F.conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * F.conv_transpose2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_gradient_routes_to_argmax():
    reset_tape()
    x = t64(np.array([[[[1.0, 5.0], [3.0, 2.0]]]]))
    F.maxpool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_batchnorm_train_normalizes_and_updates_running_stats(rng):
    x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
    state = F.BatchNormState(np.zeros(2), np.ones(2))
    y = F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)


def test_mish_and_gelu_reference_values():
    x = np.array([-2.0, 0.0, 1.5])
    mish = F.mish(Tensor(x)).data
    np.testing.assert_allclose(mish, x * np.tanh(np.log1p(np.exp(x))), rtol=1e-12)
    from scipy.special import erf

    np.testing.assert_allclose(F.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = F.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
    hnp.arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
)
def test_binary_op_gradients_match_finite_differences(a, b):
    err = grad_check(lambda x, y: (x * y + x.tanh() - y).sum(), [t64(a), t64(b)])
    assert err <= 1e-6


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 6), elements=st.floats(-5, 5)))
def test_log_softmax_equals_log_of_softmax(x):
    np.testing.assert_allclose(
        F.log_softmax(Tensor(x), axis=1).data, np.log(F.softmax(Tensor(x), axis=1).data), atol=1e-10
    )


def test_conv_geometry_errors_are_rejected():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))
