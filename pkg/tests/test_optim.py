import math

import numpy as np
import pytest

from siamsearch.autograd import default_dtype, parameter
from siamsearch.errors import RangeError, ShapeError
from siamsearch.optim import SGD, Adam, AdamState, SgdState, adam_step, cosine_lr, sgd_step


def test_sgd_momentum_and_weight_decay_by_hand():
    with default_dtype(np.float64):
        p = parameter(np.array([1.0, -2.0]))
        state = SgdState(lr=0.1, momentum=0.9, weight_decay=0.01)
        g1 = np.array([0.5, 0.5])
        sgd_step([p], [g1], state)
        v1 = g1 + 0.01 * np.array([1.0, -2.0])
        expected = np.array([1.0, -2.0]) - 0.1 * v1
        np.testing.assert_allclose(p.data, expected)

        g2 = np.array([-1.0, 0.0])
        sgd_step([p], [g2], state)
        v2 = 0.9 * v1 + g2 + 0.01 * expected
        np.testing.assert_allclose(p.data, expected - 0.1 * v2)


def test_sgd_skips_parameters_without_gradient():
    p, q = parameter(np.ones(2)), parameter(np.ones(2))
    state = SgdState(lr=1.0)
    sgd_step([p, q], [np.ones(2), None], state)
    np.testing.assert_array_equal(q.data, [1.0, 1.0])
    np.testing.assert_array_equal(p.data, [0.0, 0.0])
    assert id(q) not in state.buffers


def test_sgd_zero_lr_leaves_parameters_bitwise_unchanged():
    p = parameter(np.array([0.3, 0.7]))
    before = p.data.copy()
    opt = SGD([p], lr=0.0, momentum=0.9, weight_decay=0.5)
    p.grad = np.array([5.0, -5.0], dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(RangeError):
        SgdState(lr=-0.1)
    with pytest.raises(RangeError):
        SgdState(lr=0.1, momentum=1.0)


def test_gradient_shape_mismatch():
    p = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        sgd_step([p], [np.ones(2)], SgdState(lr=0.1))


def test_adam_first_step_moves_by_lr():
    with default_dtype(np.float64):
        p = parameter(np.array([0.0, 0.0]))
        state = AdamState(lr=0.01)
        adam_step([p], [np.array([3.0, -0.2])], state)
        # bias-corrected first step is lr * sign(g) up to eps
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)
        assert state.step == 1


def test_adam_uses_half_beta1_by_default():
    opt = Adam([parameter(np.zeros(1))], lr=1e-3)
    assert opt.state.betas == (0.5, 0.999)


def test_optimizer_buffers_resume_the_same_trajectory():
    grad = np.array([1.0, -0.5], dtype=np.float32)
    p, q = parameter(np.array([1.0, 2.0])), parameter(np.array([1.0, 2.0]))

    straight = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = grad
        straight.step()

    first = SGD([q], lr=0.1, momentum=0.9)
    q.grad = grad
    first.step()
    resumed = SGD([q], lr=0.1, momentum=0.9)
    resumed.load_buffers({k: [b.copy() for b in v] for k, v in first.buffers().items()})
    q.grad = grad
    resumed.step()
    np.testing.assert_array_equal(q.data, p.data)


def test_adam_buffers_include_both_moments():
    p = parameter(np.ones(2))
    opt = Adam([p], lr=0.1)
    p.grad = np.ones(2, dtype=np.float32)
    opt.step()
    buffers = opt.buffers()
    assert set(buffers) == {"first", "second"}
    assert buffers["first"][0].shape == (2,)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 10, 0.06) == pytest.approx(0.06)
    assert cosine_lr(5, 10, 0.06) == pytest.approx(0.03)
    assert cosine_lr(10, 10, 0.06) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(3, 10, 0.06, 0.01) == pytest.approx(0.01 + 0.025 * (1 + math.cos(math.pi * 0.3)))
    with pytest.raises(RangeError):
        cosine_lr(11, 10, 0.06)
