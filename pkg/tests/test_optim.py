"""Closed-form update checks for the two optimizers."""

import numpy as np
import pytest

import pden.autodiff as ad
from pden.optim import SGD, Adam


def _make_param(values):
    return ad.parameter(np.asarray(values, dtype=np.float64))


def test_sgd_exact_step():
    p = _make_param([1.0, 2.0, 3.0])
    p.grad = np.array([0.5, -1.0, 0.0])
    SGD([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.95, 2.1, 3.0], atol=1e-15)


def test_sgd_skips_none_grad():
    p = _make_param([1.0])
    SGD([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [1.0])


def test_adam_first_step_is_signed_lr():
    # with bias correction the first update is lr * g / (|g| + eps') ~ lr * sign(g)
    p = _make_param([1.0, 1.0, 1.0])
    p.grad = np.array([10.0, -0.02, 3.0])
    Adam([p], lr=1e-3).step()
    np.testing.assert_allclose(p.data, 1.0 - 1e-3 * np.sign(p.grad), atol=1e-5)


def test_adam_is_deterministic_given_state():
    grads = [np.array([0.3, -0.7]), np.array([-0.1, 0.2]), np.array([1.0, 1.0])]

    def run():
        p = _make_param([0.5, -0.5])
        opt = Adam([p], lr=1e-2)
        for g in grads:
            p.grad = g.copy()
            opt.step()
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_adam_none_grad_leaves_param_and_state_untouched():
    p = _make_param([1.0])
    q = _make_param([2.0])
    opt = Adam([p, q], lr=1e-3)
    p.grad = np.array([1.0])
    opt.step()  # q has no grad this step
    np.testing.assert_allclose(q.data, [2.0])
    moved_after_first = p.data.copy()
    p.grad = None
    q.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, moved_after_first)
    # global step counter: q's first update happens at t=2 from zero state
    b1, b2, lr, t = 0.9, 0.999, 1e-3, 2
    lr_t = lr * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    expected = 2.0 - lr_t * (1 - b1) / (np.sqrt(1 - b2) + 1e-8)
    np.testing.assert_allclose(q.data, expected, atol=1e-12)


def test_optimizers_reject_bad_lr():
    p = _make_param([1.0])
    with pytest.raises(ValueError):
        SGD([p], lr=0.0)
    with pytest.raises(ValueError):
        Adam([p], lr=-1.0)
