"""Optimizer contracts: decoupled decay, momentum, step bookkeeping."""

import numpy as np
import pytest

from fedprompt.autodiff import GradientTape, Tensor
from fedprompt import autodiff as ad
from fedprompt.errors import OptimizerStateError, ParameterError
from fedprompt.optim import AdamW, SGDMomentum, make_optimizer


def test_adamw_decay_only_with_zero_gradient():
    theta = Tensor([2.0, -3.0], requires_grad=True)
    opt = AdamW([theta], lr=5e-4, weight_decay=0.01)
    opt.step()  # grad buffer is zeros
    np.testing.assert_allclose(theta.data, np.array([2.0, -3.0]) * (1 - 5e-4 * 0.01), rtol=0, atol=1e-15)


def test_sgd_first_step_is_minus_lr_g():
    theta = Tensor([1.0, 1.0], requires_grad=True)
    theta.grad[...] = [0.25, -0.5]
    opt = SGDMomentum([theta], lr=0.01, momentum=0.9)
    opt.step()
    np.testing.assert_allclose(theta.data, [1.0 - 0.01 * 0.25, 1.0 + 0.01 * 0.5], atol=1e-15)


def test_adamw_single_step_matches_hand_formula():
    # Frozen from a 50-digit evaluation: theta0=1.5, g=1, lr=5e-4, wd=0.01,
    # betas=(0.9, 0.999), eps=1e-8.
    theta = Tensor([1.5], requires_grad=True)
    theta.grad[...] = 1.0
    opt = AdamW([theta], lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    opt.step()
    np.testing.assert_allclose(theta.data, [1.49949250000499999995], rtol=0, atol=1e-15)


def test_sgd_momentum_accumulates():
    theta = Tensor([0.0], requires_grad=True)
    opt = SGDMomentum([theta], lr=0.1, momentum=0.5)
    theta.grad[...] = 1.0
    opt.step()  # buf=1, theta=-0.1
    theta.grad[...] = 1.0
    opt.step()  # buf=1.5, theta=-0.25
    np.testing.assert_allclose(theta.data, [-0.25], atol=1e-15)


def test_step_counter_increments_by_one():
    theta = Tensor([1.0], requires_grad=True)
    opt = AdamW([theta])
    for expected in (1, 2, 3):
        opt.step()
        assert opt.step_count == expected


def test_gradients_zeroed_after_step():
    theta = Tensor([1.0], requires_grad=True)
    theta.grad[...] = 5.0
    SGDMomentum([theta]).step()
    np.testing.assert_array_equal(theta.grad, [0.0])


def test_missing_gradient_raises_state_error():
    frozen = Tensor([1.0])  # no grad buffer
    with pytest.raises(OptimizerStateError):
        SGDMomentum([frozen]).step()


def test_moment_buffer_shapes_mirror_parameters():
    params = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(5), requires_grad=True)]
    opt = AdamW(params)
    assert [m.shape for m in opt._m] == [(2, 3), (5,)]
    assert [v.shape for v in opt._v] == [(2, 3), (5,)]


def test_make_optimizer_dispatch():
    p = [Tensor([1.0], requires_grad=True)]
    assert make_optimizer("adamw", p).kind == "adamw"
    assert make_optimizer("sgd-momentum", p).kind == "sgd-momentum"
    with pytest.raises(ParameterError):
        make_optimizer("adagrad", p)


def test_hyperparameter_validation():
    p = [Tensor([1.0], requires_grad=True)]
    with pytest.raises(ParameterError):
        AdamW(p, lr=0.0)
    with pytest.raises(ParameterError):
        AdamW(p, betas=(1.0, 0.999))
    with pytest.raises(ParameterError):
        SGDMomentum(p, momentum=1.0)
    with pytest.raises(ParameterError):
        make_optimizer("adamw", [])


def test_adamw_descends_a_quadratic():
    theta = Tensor([4.0, -2.0], requires_grad=True)
    opt = AdamW([theta], lr=0.05, weight_decay=0.0)
    for _ in range(400):
        with GradientTape() as tape:
            loss = ad.sum_all(ad.mul(theta, theta))
            tape.backward(loss)
        opt.step()
    assert np.all(np.abs(theta.data) < 0.05)
