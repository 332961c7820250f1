import numpy as np
import pytest

import numkernel as nk
from errors import DimensionError, NumericError, ValidationError


def test_affine_matches_matmul(rng):
    params = nk.AffineParams(rng.normal(size=(3, 4)), rng.normal(size=3))
    x = rng.normal(size=(2, 5, 4))
    y = nk.affine_forward(x, params)
    expected = np.einsum("bik,ok->bio", x, params.weight.value) + params.bias.value
    assert y.shape == (2, 5, 3)
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_affine_backward_sums_over_leading_axes(rng):
    params = nk.AffineParams.uniform(rng, 3, 4)
    x = rng.normal(size=(2, 5, 4))
    g = rng.normal(size=(2, 5, 3))
    grad_x, (grad_w, grad_b) = nk.affine_backward(x, params, g)
    assert grad_x.shape == x.shape
    np.testing.assert_allclose(grad_b, g.sum(axis=(0, 1)), rtol=1e-12)
    np.testing.assert_allclose(grad_w, np.einsum("bio,bik->ok", g, x), rtol=1e-12)


def test_affine_rejects_wrong_inner_extent(rng):
    params = nk.AffineParams.uniform(rng, 3, 4)
    with pytest.raises(DimensionError):
        nk.affine_forward(np.zeros((2, 5)), params)


def test_uniform_init_bounds(rng):
    params = nk.AffineParams.uniform(rng, 50, 16)
    assert np.abs(params.weight.value).max() <= 0.25
    assert np.abs(params.bias.value).max() <= 0.25


def test_relu_subgradient_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nk.relu_forward(x), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(nk.relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


def test_tanh_stays_strictly_inside_unit_interval():
    y = nk.tanh_forward(np.array([-50.0, 0.0, 50.0]))
    assert y[1] == 0.0
    assert -1.0 < y[0] < 0 < y[2] < 1.0


def test_grid_softmax_normalizes_each_grid(rng):
    m = rng.normal(size=(7, 4, 4)) * 30.0
    p = nk.grid_softmax_forward(m)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=(1, 2)), 1.0, atol=1e-9)


def test_grid_softmax_uniform_input_is_uniform():
    p = nk.grid_softmax_forward(np.full((1, 4, 4), 3.7))
    np.testing.assert_allclose(p, 1.0 / 16, rtol=1e-12)


def test_grid_softmax_large_values_do_not_overflow():
    p = nk.grid_softmax_forward(np.array([[1000.0, 1000.0, -1000.0]]), grid_ndim=1)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0], atol=1e-12)


def test_grid_softmax_stays_strictly_positive():
    p = nk.grid_softmax_forward(np.array([[0.0, 2000.0, -2000.0]]), grid_ndim=1)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-9


def test_threshold_is_inclusive():
    p = np.array([0.1, 0.25, 0.3])
    np.testing.assert_array_equal(nk.threshold_ste_forward(p, 0.25), [0.0, 1.0, 1.0])


def test_threshold_rejects_non_positive_alpha():
    with pytest.raises(ValidationError):
        nk.threshold_ste_forward(np.ones(3), 0.0)


def test_straight_through_copies_cotangent_bitwise(rng):
    g = rng.normal(size=(5, 4, 4))
    out = nk.threshold_ste_backward(g)
    assert out is not g
    assert out.tobytes() == g.tobytes()


@pytest.mark.parametrize("x", [np.array([0.3, -1.2, 2.0]), np.array([[1.0, 2.0], [3.0, -4.0]])])
def test_finite_diff_agrees_on_smooth_function(x):
    report = nk.finite_diff_check(lambda v: (float((v ** 3).sum()), 3 * v ** 2), x)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_finite_diff_flags_wrong_gradient():
    report = nk.finite_diff_check(lambda v: (float((v ** 2).sum()), -2 * v), np.array([1.0, 2.0]))
    assert not report.passed


def test_numeric_gradient_raises_on_non_finite_values():
    with pytest.raises(NumericError):
        nk.numeric_gradient(lambda v: float(np.log(v).sum()), np.array([0.0]))


def test_dual_tensor_accumulates_and_resets():
    t = nk.DualTensor(np.zeros((2, 2)))
    t.accumulate(np.ones((2, 2)))
    t.accumulate(np.ones((2, 2)))
    np.testing.assert_array_equal(t.grad, 2.0)
    t.zero_grad()
    np.testing.assert_array_equal(t.grad, 0.0)
    with pytest.raises(DimensionError):
        t.accumulate(np.ones(3))


def test_grid_softmax_shift_invariance(rng):
    m = rng.normal(size=(5, 4, 4))
    np.testing.assert_allclose(nk.grid_softmax_forward(m + 17.5), nk.grid_softmax_forward(m), rtol=1e-12)


def test_grid_softmax_backward_annihilates_constant_cotangent(rng):
    p = nk.grid_softmax_forward(rng.normal(size=(3, 4, 4)))
    grad = nk.grid_softmax_backward(p, np.full_like(p, 2.5))
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_grid_softmax_backward_uniform_one_hot():
    p = np.full((1, 4, 4), 1.0 / 16)
    onehot = np.zeros_like(p)
    onehot[0, 1, 2] = 1.0
    grad = nk.grid_softmax_backward(p, onehot)
    np.testing.assert_allclose(grad, p * (onehot - 1.0 / 16), atol=1e-15)


def test_threshold_is_monotone_in_p(rng):
    for _ in range(100):
        p = rng.uniform(size=(4, 4))
        raised = p + rng.uniform(0, 0.5, size=p.shape) * rng.integers(0, 2, size=p.shape)
        z, z_raised = nk.threshold_ste_forward(p, 0.5), nk.threshold_ste_forward(raised, 0.5)
        assert np.all(z_raised >= z)
