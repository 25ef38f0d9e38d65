import math

import numpy as np
import pytest

from sgan.steerable import (
    FilterBank,
    build_filter_bank,
    filter_image,
    gaussian_derivative_kernel,
    huber_value,
    steer_second_derivative,
    steerable_loss,
    steering_basis,
    steering_weights,
)
from sgan.tensor import Tensor

from oracles import conv2d_loops, huber_scalar


def _analytic_derivative(order, theta, sigma=1.0, size=5):
    """Evaluate the Gaussian derivative pixel by pixel, then mean-subtract and normalise."""
    c = size // 2
    k = np.zeros((size, size))
    for row in range(size):
        for col in range(size):
            x, y = col - c, row - c
            u = x * math.cos(theta) + y * math.sin(theta)
            g = math.exp(-(x * x + y * y) / (2 * sigma * sigma))
            k[row, col] = -u / sigma**2 * g if order == 1 else (u * u / sigma**4 - 1 / sigma**2) * g
    k -= k.mean()
    return k / math.sqrt((k * k).sum())


def _single_filter_bank(kernel):
    return FilterBank(np.asarray(kernel, dtype=float)[None], np.zeros(1), ("even",), 1.0)


# -- kernels ----------------------------------------------------------------


@pytest.mark.parametrize("order", [1, 2])
def test_kernel_matches_pointwise_formula(order):
    for theta in np.linspace(0, np.pi, 7):
        np.testing.assert_allclose(gaussian_derivative_kernel(order, theta), _analytic_derivative(order, theta), atol=1e-14)


def test_odd_kernel_antisymmetric_in_x():
    k = gaussian_derivative_kernel(1, 0.0)
    np.testing.assert_allclose(k[:, ::-1], -k, atol=1e-15)


def test_even_kernel_symmetric_in_x():
    k = gaussian_derivative_kernel(2, 0.0)
    np.testing.assert_allclose(k[:, ::-1], k, atol=1e-15)


def test_quarter_turn_transposes_odd_kernel():
    np.testing.assert_allclose(gaussian_derivative_kernel(1, np.pi / 2), gaussian_derivative_kernel(1, 0.0).T, atol=1e-10)


@pytest.mark.parametrize("kwargs", [{"size": 4}, {"sigma": 0.0}, {"sigma": -1.0}])
def test_kernel_argument_errors(kwargs):
    with pytest.raises(ValueError):
        gaussian_derivative_kernel(2, 0.0, **{"sigma": 1.0, "size": 5, **kwargs})


# -- bank ---------------------------------------------------------------------


def test_default_bank_layout():
    bank = build_filter_bank(20, 5, 1.0)
    assert bank.kernels.shape == (20, 5, 5)
    assert bank.kinds == ("even",) * 10 + ("odd",) * 10
    np.testing.assert_allclose(bank.orientations[:10], np.arange(10) * np.pi / 10, atol=0)
    np.testing.assert_array_equal(bank.orientations[10:], bank.orientations[:10])
    assert bank.sigma == 1.0 and bank.size == 5


def test_bank_invariants():
    bank = build_filter_bank()
    for k in bank.kernels:
        assert abs(k.sum()) <= 1e-8
        assert abs(np.linalg.norm(k) - 1.0) <= 1e-12
    for half in (bank.orientations[:10], bank.orientations[10:]):
        steps = np.diff(half)
        assert (steps > 0).all() and np.allclose(steps, steps[0], atol=1e-15)


def test_two_filter_bank():
    bank = build_filter_bank(2)
    assert bank.kinds == ("even", "odd")
    np.testing.assert_array_equal(bank.orientations, [0.0, 0.0])


def test_odd_count_rejected():
    with pytest.raises(ValueError):
        build_filter_bank(5)


def test_bank_is_read_only():
    bank = build_filter_bank(4)
    with pytest.raises(ValueError):
        bank.kernels[0, 0, 0] = 1.0


# -- steering ---------------------------------------------------------------


def test_steering_weights_sum_to_one_and_select_basis():
    for theta in np.random.default_rng(0).uniform(0, 2 * np.pi, 100):
        # closed form: sum_j (1 + 2 cos(2(theta - theta_j))) / 3 = 1 since the three cosines cancel
        assert abs(steering_weights(theta).sum() - 1.0) < 1e-14
    np.testing.assert_allclose(steering_weights(0.0), [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(steering_weights(np.pi / 3), [0.0, 1.0, 0.0], atol=1e-15)


def test_steer_at_basis_angle_reproduces_basis_response(rng):
    img = rng.standard_normal((16, 16))
    maps = [filter_image(img, k) for k in steering_basis()]
    np.testing.assert_allclose(steer_second_derivative(0.0, maps), maps[0], atol=1e-14)


def test_steer_quarter_pi_matches_direct_filtering(rng):
    img = rng.standard_normal((16, 16))
    maps = [filter_image(img, k) for k in steering_basis()]
    direct = filter_image(img, gaussian_derivative_kernel(2, np.pi / 4))
    assert np.max(np.abs(steer_second_derivative(np.pi / 4, maps) - direct)) < 1e-6


def test_steer_random_angles(rng):
    img = rng.standard_normal((16, 16))
    maps = [filter_image(img, k) for k in steering_basis()]
    worst = 0.0
    for theta in rng.uniform(0, np.pi, 100):
        direct = filter_image(img, gaussian_derivative_kernel(2, theta))
        worst = max(worst, float(np.max(np.abs(steer_second_derivative(theta, maps) - direct))))
    assert worst < 1e-6


def test_steer_shape_mismatch():
    with pytest.raises(ValueError):
        steer_second_derivative(0.1, [np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5))])


def test_filter_image_matches_loops(rng):
    img, k = rng.standard_normal((7, 6)), rng.standard_normal((5, 5))
    np.testing.assert_allclose(filter_image(img, k), conv2d_loops(img[None, None], k[None, None], padding=2)[0, 0], atol=1e-12)


# -- huber and loss -----------------------------------------------------------


def test_huber_branches_and_joint():
    assert huber_value(0.0) == 0.0
    assert huber_value(0.5) == 0.125
    assert huber_value(2.0) == 1.5
    for d in np.linspace(-4, 4, 81):
        assert huber_value(d) == pytest.approx(huber_scalar(d), abs=1e-15)
    # value and slope agree from both sides of |d| = 1
    h = 1e-7
    assert 0.5 * 1.0**2 == 1.0 - 0.5
    left = (huber_value(1.0) - huber_value(1.0 - h)) / h
    right = (huber_value(1.0 + h) - huber_value(1.0)) / h
    assert left == pytest.approx(1.0, abs=1e-6) and right == pytest.approx(1.0, abs=1e-6)


def test_loss_zero_for_identical_images(rng):
    y = Tensor(rng.standard_normal((2, 1, 8, 8)))
    assert steerable_loss(y, y, build_filter_bank()).item() == 0.0


@pytest.mark.parametrize("offset,expected", [(0.5, 0.125), (2.0, 1.5)])
def test_loss_uniform_response_difference(rng, offset, expected):
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    y = rng.standard_normal((1, 1, 6, 6))
    loss = steerable_loss(Tensor(y), Tensor(y + offset), _single_filter_bank(delta)).item()
    assert abs(loss - expected) <= 1e-12


def test_loss_matches_per_filter_reference(rng):
    bank = build_filter_bank()
    y, y_hat = rng.standard_normal((2, 1, 8, 8)), rng.standard_normal((2, 1, 8, 8))
    per_filter = []
    for k in bank.kernels:
        ry = conv2d_loops(y, k[None, None], padding=2)
        rh = conv2d_loops(y_hat, k[None, None], padding=2)
        per_filter.append(np.mean([huber_scalar(d) for d in (ry - rh).ravel()]))
    assert steerable_loss(Tensor(y), Tensor(y_hat), bank).item() == pytest.approx(np.mean(per_filter), abs=1e-12)


def test_loss_symmetric_nonnegative_offset_invariant(rng):
    bank = build_filter_bank()
    for _ in range(10):
        a, b = rng.standard_normal((1, 1, 10, 10)), rng.standard_normal((1, 1, 10, 10))
        lab = steerable_loss(Tensor(a), Tensor(b), bank).item()
        assert lab > 0
        assert lab == pytest.approx(steerable_loss(Tensor(b), Tensor(a), bank).item(), abs=1e-15)
        c = float(rng.uniform(-5, 5))
        shifted = steerable_loss(Tensor(a + c), Tensor(b + c), bank).item()
        assert abs(shifted - lab) <= 1e-10


def test_loss_rejects_multichannel():
    with pytest.raises(ValueError):
        steerable_loss(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 4))), build_filter_bank())


def test_loss_gradient_reaches_y_hat_only(rng):
    y = Tensor(rng.standard_normal((1, 1, 6, 6)))
    y_hat = Tensor(rng.standard_normal((1, 1, 6, 6)), requires_grad=True)
    steerable_loss(y, y_hat, build_filter_bank()).backward()
    assert y.grad is None and np.abs(y_hat.grad).sum() > 0
