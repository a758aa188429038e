"""Graph mechanics and op-level oracles for the reverse-mode tensor core.

Numeric gradient coverage lives in the finite-difference harness; these tests
pin the exact closed forms and the graph bookkeeping rules.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pden.autodiff as ad
from pden.autodiff import DomainError, ShapeError, Tensor
from pden.rng import Rng


def test_add_mul_closed_form_grads():
    x = ad.parameter(np.array([2.0, 3.0]))
    y = ad.parameter(np.array([4.0, 5.0]))
    out = ad.tsum(ad.mul(ad.add(x, y), y))  # sum((x+y)*y)
    out.backward()
    np.testing.assert_allclose(x.grad, [4.0, 5.0])
    np.testing.assert_allclose(y.grad, [2.0 + 2 * 4.0, 3.0 + 2 * 5.0])


def test_matmul_oracle():
    a = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = ad.parameter(np.array([[5.0, 6.0], [7.0, 8.0]]))
    c = ad.matmul(a, b)
    np.testing.assert_allclose(c.data, [[19.0, 22.0], [43.0, 50.0]])
    ad.tsum(c).backward()
    np.testing.assert_allclose(a.grad, [[11.0, 15.0], [11.0, 15.0]])
    np.testing.assert_allclose(b.grad, [[4.0, 4.0], [6.0, 6.0]])


def test_diamond_graph_accumulates_once_per_path():
    x = ad.parameter(np.array([3.0]))
    y = ad.add(ad.mul(x, x), ad.mul(x, ad.constant(np.array([2.0]))))
    ad.tsum(y).backward()
    np.testing.assert_allclose(x.grad, [2 * 3.0 + 2.0])


def test_repeated_backward_accumulates_linearly():
    x = ad.parameter(np.array([1.5, -0.5]))
    out = ad.tsum(ad.mul(x, x))
    out.backward()
    g1 = x.grad.copy()
    out.backward()
    np.testing.assert_allclose(x.grad, 2 * g1)
    out.backward()
    np.testing.assert_allclose(x.grad, 3 * g1)


def test_zero_grad_resets():
    x = ad.parameter(np.array([1.0]))
    ad.tsum(ad.mul(x, x)).backward()
    assert x.grad is not None
    x.zero_grad()
    assert x.grad is None


def test_detach_blocks_gradient():
    x = ad.parameter(np.array([2.0]))
    out = ad.tsum(ad.mul(x.detach(), x))
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0])  # only the live branch contributes


def test_no_grad_forward_builds_no_graph():
    x = ad.constant(np.ones((2, 2)))
    y = ad.relu(ad.add(x, x))
    assert not y.requires_grad and y._parents == ()


def test_scalar_broadcast_only():
    x = ad.parameter(np.ones((2, 3)))
    s = ad.parameter(np.array(2.0))
    out = ad.tsum(ad.mul(x, s))
    out.backward()
    np.testing.assert_allclose(s.grad, 6.0)
    with pytest.raises(ShapeError):
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.mul(ad.constant(np.ones((4,))), ad.constant(np.ones((4, 1))))


def test_div_by_zero_raises():
    with pytest.raises(DomainError):
        ad.div(ad.constant(np.ones(3)), ad.constant(np.array([1.0, 0.0, 2.0])))


def test_log_domain_checked():
    with pytest.raises(DomainError):
        ad.log(ad.constant(np.array([1.0, -1.0])))


def test_gather_rows_picks_one_column_per_row():
    x = ad.parameter(np.arange(12.0).reshape(4, 3))
    idx = np.array([1, 0, 2, 1])
    out = ad.gather_rows(x, idx)
    np.testing.assert_allclose(out.data, [1.0, 3.0, 8.0, 10.0])
    ad.tsum(out).backward()
    expected = np.zeros((4, 3))
    expected[np.arange(4), idx] = 1.0
    np.testing.assert_allclose(x.grad, expected)
    with pytest.raises(ShapeError):
        ad.gather_rows(x, np.array([0, 1]))
    with pytest.raises(IndexError):
        ad.gather_rows(x, np.array([0, 1, 2, 3]))


def test_clamp_grad_boundary_convention():
    x = ad.parameter(np.array([0.5, 1.0, 2.0]))
    ad.tsum(ad.clamp_min(x, 1.0)).backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0])  # passes at the bound
    y = ad.parameter(np.array([0.5, 1.0, 2.0]))
    ad.tsum(ad.clamp_max(y, 1.0)).backward()
    np.testing.assert_allclose(y.grad, [1.0, 1.0, 0.0])


def test_softmax_rows_and_shift_invariance():
    x = ad.constant(np.array([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]))
    p = ad.softmax(x)
    np.testing.assert_allclose(p.data.sum(axis=1), [1.0, 1.0], atol=1e-12)
    shifted = ad.softmax(ad.add(x, ad.constant(np.array(100.0))))
    np.testing.assert_allclose(shifted.data, p.data, atol=1e-12)


def test_l2_normalize_unit_rows_and_zero_row_raises():
    z = ad.constant(Rng(0).normal((5, 4)))
    n = ad.l2_normalize(z)
    np.testing.assert_allclose(np.linalg.norm(n.data, axis=1), np.ones(5), atol=1e-12)
    with pytest.raises(DomainError):
        ad.l2_normalize(ad.constant(np.zeros((2, 3))))


def test_instance_stats_oracle():
    x = ad.constant(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    mu, sigma = ad.instance_stats(x)
    np.testing.assert_allclose(mu.data, [[2.5]])
    np.testing.assert_allclose(sigma.data, [[np.sqrt(1.25)]], atol=1e-15)


def test_instance_stats_constant_channel_floors_sigma():
    x = ad.parameter(np.full((1, 1, 3, 3), 7.0))
    mu, sigma = ad.instance_stats(x)
    np.testing.assert_allclose(mu.data, [[7.0]])
    np.testing.assert_allclose(sigma.data, [[1e-5]])
    ad.tsum(sigma).backward()
    assert np.all(np.isfinite(x.grad))


def test_conv2d_shape_oracle_and_validation():
    x = ad.constant(np.ones((2, 3, 8, 8)))
    w = ad.constant(np.ones((5, 3, 3, 3)))
    out = ad.conv2d(x, w, stride=2, padding=1)
    assert out.data.shape == (2, 5, 4, 4)
    with pytest.raises(ShapeError):
        ad.conv2d(ad.constant(np.ones((2, 4, 8, 8))), w, stride=1, padding=1)
    with pytest.raises(ValueError):
        ad.conv2d(x, w, stride=0, padding=1)
    with pytest.raises(ValueError):
        ad.conv2d(x, w, stride=1, padding=-1)
    with pytest.raises(ShapeError):
        ad.conv2d(ad.constant(np.ones((2, 3, 2, 2))), w, stride=1, padding=0)


def test_conv2d_identity_kernel():
    img = Rng(1).normal((1, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.constant(img), ad.constant(w), stride=1, padding=1)
    np.testing.assert_allclose(out.data, img, atol=1e-15)


def test_upsample2x_and_pool_roundtrip():
    x = ad.constant(Rng(2).normal((2, 3, 4, 4)))
    up = ad.upsample2x(x)
    assert up.data.shape == (2, 3, 8, 8)
    np.testing.assert_allclose(up.data[:, :, ::2, ::2], x.data)
    pooled = ad.global_avg_pool(x)
    np.testing.assert_allclose(pooled.data, x.data.mean(axis=(2, 3)), atol=1e-15)


def test_concat_and_reshape_grads_route_correctly():
    a = ad.parameter(np.ones((2, 3)))
    b = ad.parameter(np.ones((2, 2)))
    out = ad.concat([a, b], axis=1)
    weights = ad.constant(np.arange(10.0).reshape(2, 5))
    ad.tsum(ad.mul(out, weights)).backward()
    np.testing.assert_allclose(a.grad, [[0.0, 1.0, 2.0], [5.0, 6.0, 7.0]])
    np.testing.assert_allclose(b.grad, [[3.0, 4.0], [8.0, 9.0]])


@given(n=st.integers(1, 6), d=st.integers(1, 6), seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_sum_to_one_property(n, d, seed):
    p = ad.softmax(ad.constant(Rng(seed).normal((n, d), std=5.0)))
    np.testing.assert_allclose(p.data.sum(axis=1), np.ones(n), atol=1e-12)
    assert np.all(p.data >= 0.0)


@given(n=st.integers(1, 6), d=st.integers(2, 8), seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_l2_normalize_property(n, d, seed):
    z = Rng(seed).normal((n, d)) + 0.1  # keep rows away from exact zero
    out = ad.l2_normalize(ad.constant(z))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(n), atol=1e-9)


@given(seed=st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_sum_mean_consistency_property(seed):
    x = Rng(seed).normal((3, 4))
    s = ad.tsum(ad.constant(x)).item()
    m = ad.tmean(ad.constant(x)).item()
    assert abs(s - m * x.size) < 1e-9 * max(1.0, abs(s))
