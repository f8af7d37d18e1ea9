import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from discoreg import autodiff as ad
from discoreg.autodiff import AdamState, Tensor, adam_step
from discoreg.gradcheck import numeric_grad, rel_error


def grad_of(fn, x):
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    fn(t).backward()
    return t.grad


def fd_check(fn, x, tol=1e-6):
    x = np.array(x, dtype=np.float64)
    a = grad_of(fn, x)
    n = numeric_grad(lambda arr: float(fn(Tensor(arr)).item()), x.copy())
    assert rel_error(a, n) < tol


def test_add_vectors():
    out = ad.add(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 1.0, 1.0]))
    np.testing.assert_array_equal(out.numpy(), [2.0, 3.0, 4.0])


def test_mul_by_one_is_identity_with_unit_grad():
    x = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
    y = x * 1.0
    np.testing.assert_array_equal(y.numpy(), x.numpy())
    ad.sum(y).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_grad_sum_of_product_is_other_factor():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    g = grad_of(lambda t: ad.sum(t * Tensor(b)), a)
    np.testing.assert_array_equal(g, b)
    fd_check(lambda t: ad.sum(t * Tensor(b)), a)


def test_matmul_identity_and_arithmetic():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(M)).numpy(), M)
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.numpy(), [[3.0], [7.0]])


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    W = rng.normal(size=(4, 3))
    fd_check(lambda t: ad.sum(ad.matmul(t, Tensor(B)) * Tensor(W)), A)
    fd_check(lambda t: ad.sum(ad.matmul(Tensor(A), t) * Tensor(W)), B)


def test_softmax_cases():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).numpy(), [1 / 3] * 3, atol=1e-15)
    out = ad.softmax(Tensor([1000.0, 0.0])).numpy()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)
    rng = np.random.default_rng(2)
    w = rng.normal(size=6)
    fd_check(lambda t: ad.sum(ad.softmax(t) * Tensor(w)), rng.normal(size=6))


def test_small_identities():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.sum(Tensor(np.ones((2, 3)))).item() == 6.0
    assert ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=1).shape == (2, 7)


def test_backward_simple_losses():
    np.testing.assert_array_equal(grad_of(lambda t: ad.sum(t), np.zeros((2, 2))), np.ones((2, 2)))
    np.testing.assert_array_equal(grad_of(lambda t: ad.sum(ad.square(t)), [1.0, 2.0]), [2.0, 4.0])


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: ad.sum(ad.exp(t) * 0.3),
        lambda t: ad.sum(ad.log(ad.square(t) + 1.0)),
        lambda t: ad.mean(ad.sigmoid(t) * t),
        lambda t: ad.sum(ad.div(t, ad.square(t) + 2.0)),
        lambda t: ad.sum(ad.neg(t) * ad.sub(t, 0.5)),
        lambda t: ad.sum(ad.transpose(t, (1, 0)) * Tensor(np.arange(12.0).reshape(4, 3))),
        lambda t: ad.sum(ad.reshape(t, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3))),
        lambda t: ad.sum(ad.square(ad.getitem(t, (slice(1, 3), [0, 2, 2])))),
        lambda t: ad.sum(ad.stack([t, ad.square(t)], axis=0)[1]),
        lambda t: ad.sum(ad.softmax(t, axis=0) * Tensor(np.arange(12.0).reshape(3, 4))),
        lambda t: ad.sum(ad.mean(t, axis=1, keepdims=True) * t),
    ],
)
def test_primitive_compositions_match_finite_differences(fn):
    rng = np.random.default_rng(3)
    fd_check(fn, rng.uniform(0.3, 2.0, size=(3, 4)), tol=1e-6)


def test_broadcast_gradients_reduce_to_input_shape():
    x = Tensor(np.ones((3, 1)), requires_grad=True)
    y = Tensor(np.arange(4.0), requires_grad=True)
    ad.sum(x * y).backward()
    assert x.grad.shape == (3, 1)
    np.testing.assert_array_equal(x.grad, np.full((3, 1), 6.0))
    np.testing.assert_array_equal(y.grad, np.full(4, 3.0))


def test_relu_gradient_away_from_kink():
    x = np.array([-1.5, -0.2, 0.3, 2.0])
    np.testing.assert_array_equal(grad_of(lambda t: ad.sum(ad.relu(t)), x), [0, 0, 1, 1])


def test_shared_subexpression_accumulates():
    # f = x*x + x -> f' = 2x + 1
    g = grad_of(lambda t: ad.sum(t * t + t), [1.0, -3.0])
    np.testing.assert_array_equal(g, [3.0, -5.0])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


@given(arrays(np.float64, (5,), elements=st.floats(-30, 30)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(Tensor(x)).numpy()
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step([p], AdamState(), lr=1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array(0.5), requires_grad=True)
    p.grad = np.array(1.0)
    adam_step([p], AdamState(), lr=1e-3)
    # m_hat = 1, v_hat = 1 -> step lr / (1 + eps)
    assert abs((0.5 - p.data) - 1e-3 / (1 + 1e-8)) < 1e-15


def _bowl(lr, steps=2000):
    x = Tensor(np.array(1.0), requires_grad=True)
    state = AdamState()
    for _ in range(steps):
        x.grad = None
        ad.square(x).backward()
        adam_step([x], state, lr=lr)
    return float(x.data)


def test_adam_quadratic_bowl():
    assert abs(_bowl(1e-2)) < 1e-2


def test_adam_bowl_trajectory_matches_reference():
    # value from an independent Adam implementation (same betas/eps, float64)
    assert abs(_bowl(1e-3) - 0.020662311203242627) < 1e-12
