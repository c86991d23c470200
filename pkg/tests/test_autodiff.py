import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marginkd.autodiff import (NonFiniteError, ShapeError, Tensor, concat, cosine_similarity,
                               finite_diff_check, layer_norm, no_grad, tensor, where)


def leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def test_matmul_hand_case():
    out = tensor([[1, 2], [3, 4]]) @ tensor([[1], [1]])
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_exp_of_zero_is_one():
    assert tensor(0.0).exp().item() == 1.0


def test_softmax_symmetric():
    np.testing.assert_array_equal(tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])


def test_square_gradient():
    x = tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_max_pool_gradient_routes_to_argmax():
    x = tensor([[1.0, 5.0, 2.0], [7.0, 0.0, 7.0]], requires_grad=True)
    x.max(axis=1).sum().backward()
    # tie in row 2 goes to the lowest index
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_gradient_accumulates_over_uses():
    rng = np.random.default_rng(1)
    x = leaf(rng, 4)
    w = rng.normal(size=4)
    (x * w).sum().backward()
    single = x.grad.copy()
    x.grad = None
    k = 3
    total = (x * w).sum()
    for _ in range(k - 1):
        total = total + (x * w).sum()
    total.backward()
    np.testing.assert_allclose(x.grad, k * single, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_backward_without_graph():
    with pytest.raises(RuntimeError):
        tensor(1.0).backward()


def test_non_finite_detected():
    with pytest.raises(NonFiniteError):
        tensor([0.0]).log()
    with pytest.raises(NonFiniteError):
        tensor([1.0]) / tensor([0.0])
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        tensor(np.ones((2, 3))) @ tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        tensor(np.ones(3)) + tensor(np.ones(4))


def test_no_grad_builds_no_graph():
    x = tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_sum_ignores_trailing_zero_padding_bitwise():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 13))
    padded = np.concatenate([x, np.zeros((3, 7))], axis=1)
    np.testing.assert_array_equal(tensor(x).sum(axis=1).data, tensor(padded).sum(axis=1).data)


def test_finite_diff_sum_is_exact():
    # dyadic step on integers keeps x +- h and the difference exact
    x = tensor([3.0, -1.0, 0.0, 7.0])
    assert finite_diff_check(lambda t: t.sum(), x, h=2.0 ** -17) == 0.0
    y = tensor(np.random.default_rng(0).normal(size=5))
    assert finite_diff_check(lambda t: t.sum(), y) < 1e-10


def test_finite_diff_square():
    assert finite_diff_check(lambda t: (t * t).sum(), tensor([2.0]), h=1e-5) < 1e-8


def test_finite_diff_gaussian_kernel_at_half():
    mu, sigma = 0.4, 0.1

    def kernel(c):
        d = c - mu
        return (-(d * d) / (2 * sigma ** 2)).exp().sum()

    assert finite_diff_check(kernel, tensor([0.5])) < 1e-6


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: t.sum(), tensor([1.0]), h=0.0)


def _primitive_cases(rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, 2)
    c = leaf(rng, 3, 4)
    pos = leaf(rng, 3, 4, lo=0.5, hi=2.0)
    mask = rng.random((3, 4)) > 0.5
    w = rng.normal(size=(3, 2))
    v = rng.normal(size=(3, 4))
    u = rng.normal(size=(3, 3))
    return [
        ("matmul", a, lambda t: ((t @ b) * w).sum()),
        ("matmul_rhs", b, lambda t: ((a @ t) * w).sum()),
        ("add_broadcast", c, lambda t: ((t + a[0]) * v).sum()),
        ("sub", a, lambda t: ((c - t) * v).sum()),
        ("mul", a, lambda t: (t * c * v).sum()),
        ("div", pos, lambda t: (a / t).sum()),
        ("exp", a, lambda t: (t.exp() * v).sum()),
        ("log", pos, lambda t: (t.log() * v).sum()),
        ("sqrt", pos, lambda t: (t.sqrt() * v).sum()),
        ("tanh", a, lambda t: (t.tanh() * v).sum()),
        ("sigmoid", a, lambda t: (t.sigmoid() * v).sum()),
        ("softplus", a, lambda t: (t.softplus() * v).sum()),
        ("gelu", a, lambda t: (t.gelu() * v).sum()),
        ("sum_axis", a, lambda t: (t.sum(axis=0) * v[0]).sum()),
        ("mean", a, lambda t: (t.mean(axis=1) * v[:, 0]).sum()),
        ("max", a, lambda t: (t.max(axis=1) * v[:, 0]).sum()),
        ("softmax", a, lambda t: (t.softmax(axis=-1) * v).sum()),
        ("cosine", a, lambda t: (cosine_similarity(t, c) * u).sum()),
        ("concat", a, lambda t: (concat([t, c], axis=0) * np.vstack([v, v])).sum()),
        ("slice", a, lambda t: (t[1:, ::2] * v[1:, ::2]).sum()),
        ("gather", a, lambda t: (t[np.array([0, 2, 0])] * v).sum()),
        ("reshape_transpose", a, lambda t: (t.reshape(2, 6).T * v.reshape(6, 2)).sum()),
        ("where", a, lambda t: (where(mask, t, c * 2.0) * v).sum()),
        ("layer_norm", a, lambda t: (layer_norm(t, Tensor(np.ones(4) * 1.5), Tensor(np.zeros(4))) * v).sum()),
        ("pow", pos, lambda t: ((t ** 3) * v).sum()),
    ]


@pytest.mark.parametrize("seed", range(3))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, x, f in _primitive_cases(rng):
        err = finite_diff_check(f, x, h=1e-5)
        assert err < 1e-4, (name, err)


def test_layer_norm_parameter_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng, 2, 5)
    g = leaf(rng, 5)
    b = leaf(rng, 5)
    v = rng.normal(size=(2, 5))
    assert finite_diff_check(lambda t: (layer_norm(x, t, b) * v).sum(), g) < 1e-4
    assert finite_diff_check(lambda t: (layer_norm(x, g, t) * v).sum(), b) < 1e-4


def test_random_three_layer_graph():
    rng = np.random.default_rng(11)
    x = leaf(rng, 4, 3)
    w1, w2, w3 = leaf(rng, 3, 5), leaf(rng, 5, 5), leaf(rng, 5, 1)

    def f(_):
        h = (x @ w1).tanh()
        h = (h @ w2).gelu()
        return (h @ w3).softplus().sum()

    for p in (x, w1, w2, w3):
        assert finite_diff_check(f, p) < 1e-4


def test_cosine_zero_vector_is_zero():
    a = tensor([[0.0, 0.0], [1.0, 0.0]], requires_grad=True)
    b = tensor([[1.0, 1.0]])
    out = cosine_similarity(a, b)
    assert out.data[0, 0] == 0.0
    out.sum().backward()
    np.testing.assert_array_equal(a.grad[0], [0.0, 0.0])


def _build(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    w = leaf(rng, 4, 4)
    loss = ((x @ w).softmax(axis=-1) * (x @ w).gelu()).sum()
    loss.backward()
    return loss.data, x.grad, w.grad


def test_determinism_bitwise():
    a, b = _build(42), _build(42)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6), st.integers(1, 4))
def test_leaf_reuse_is_sum_of_single_uses(values, k):
    x = tensor(values, requires_grad=True)
    (x.exp()).sum().backward()
    single = x.grad.copy()
    x.grad = None
    total = x.exp().sum()
    for _ in range(k - 1):
        total = total + x.exp().sum()
    total.backward()
    np.testing.assert_allclose(x.grad, k * single, rtol=1e-15, atol=0)
