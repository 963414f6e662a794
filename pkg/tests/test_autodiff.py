"""Gradient engine tests: every op is checked against central differences."""

import numpy as np
import pytest

from mimofm.autodiff import Tensor, as_tensor, concat, layer_norm, straight_through
from mimofm.errors import GraphConsumedError


def numeric_grad(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar-valued fn at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_op(build, x0, rtol=1e-6, atol=1e-8):
    """build(tensor) -> scalar Tensor; compares backward to central FD."""
    t = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    out = build(t)
    out.backward()

    def fn(x):
        return build(Tensor(np.array(x))).data.item()

    want = numeric_grad(fn, np.array(x0, dtype=np.float64))
    np.testing.assert_allclose(t.grad, want, rtol=rtol, atol=atol)


def test_arithmetic_ops():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(0.5, 2.0, (3, 4))
    other = rng.standard_normal((3, 4))
    check_op(lambda t: (t + other).sum(), x0)
    check_op(lambda t: (other - t).sum(), x0)
    check_op(lambda t: (t * other * t).sum(), x0)
    check_op(lambda t: (t / (other**2 + 1.0)).sum(), x0)
    check_op(lambda t: (2.0 / t).sum(), x0)
    check_op(lambda t: (t**3).sum(), x0)
    check_op(lambda t: (-t * t).sum(), x0)


def test_unary_ops():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(0.2, 1.5, (2, 5))
    check_op(lambda t: t.exp().sum(), x0)
    check_op(lambda t: t.log().sum(), x0)
    check_op(lambda t: t.log1p().sum(), x0)
    check_op(lambda t: t.sqrt().sum(), x0)
    check_op(lambda t: t.sigmoid().sum(), x0)
    check_op(lambda t: ((t - 0.8).relu() * t).sum(), x0)


def test_reductions_and_shapes():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 3, 2))
    check_op(lambda t: (t.sum(axis=1) ** 2).sum(), x0)
    check_op(lambda t: (t.sum(axis=(0, 2), keepdims=True) ** 2).sum(), x0)
    check_op(lambda t: (t.mean(axis=-1) ** 2).sum(), x0)
    check_op(lambda t: (t.mean(axis=(1, 2)) ** 2).sum(), x0)
    check_op(lambda t: t.mean(), x0)
    check_op(lambda t: (t.reshape(6, 4) ** 2).mean(), x0)
    check_op(lambda t: (t.swapaxes(0, 2) * w).sum(), x0)
    check_op(lambda t: (t[:, 1:, ::2] ** 2).sum(), x0)


def test_broadcasting_grads():
    rng = np.random.default_rng(3)
    a0 = rng.standard_normal((2, 3))
    b0 = rng.standard_normal(3)
    # gradient wrt the broadcast operand must be summed over the batch axis
    a = Tensor(a0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    ((a * b).sum()).backward()
    np.testing.assert_allclose(b.grad, a0.sum(axis=0), rtol=1e-12)
    np.testing.assert_allclose(a.grad, np.broadcast_to(b0, (2, 3)), rtol=1e-12)
    c0 = rng.standard_normal((4, 1, 3))
    check_op(lambda t: (t + c0).sum(), rng.standard_normal(3))


def test_matmul_grads():
    rng = np.random.default_rng(4)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    check_op(lambda t: (t @ b0).sum(), a0)
    check_op(lambda t: (as_tensor(a0) @ t * w).sum(), b0)
    # batched with broadcast on the left operand
    c0 = rng.standard_normal((5, 3, 4))
    check_op(lambda t: ((t @ b0) ** 2).sum(), c0)
    check_op(lambda t: ((as_tensor(c0) @ t) ** 2).mean(), b0)


def test_softmax_grad_and_value():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((2, 3, 4))
    s = Tensor(x0).softmax(axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, rtol=1e-12)
    w = rng.standard_normal((2, 3, 4))
    check_op(lambda t: (t.softmax(axis=-1) * w).sum(), x0)
    check_op(lambda t: (t.softmax(axis=1) * w).sum(), x0)


def test_layer_norm_value_and_grads():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((2, 5))
    g0 = rng.uniform(0.5, 1.5, 5)
    b0 = rng.standard_normal(5)
    out = layer_norm(Tensor(x0), Tensor(g0), Tensor(b0))
    normed = (x0 - x0.mean(-1, keepdims=True)) / np.sqrt(
        x0.var(-1, keepdims=True) + 1e-5
    )
    np.testing.assert_allclose(out.data, normed * g0 + b0, rtol=1e-10)
    w = rng.standard_normal((2, 5))
    check_op(lambda t: (layer_norm(t, as_tensor(g0), as_tensor(b0)) * w).sum(), x0, rtol=1e-5)
    check_op(lambda t: (layer_norm(as_tensor(x0), t, as_tensor(b0)) * w).sum(), g0, rtol=1e-5)
    check_op(lambda t: (layer_norm(as_tensor(x0), as_tensor(g0), t) * w).sum(), b0, rtol=1e-5)


def test_concat_grads():
    rng = np.random.default_rng(7)
    a0 = rng.standard_normal((2, 3))
    b0 = rng.standard_normal((2, 2))
    w = rng.standard_normal((2, 5))
    check_op(lambda t: (concat([t, as_tensor(b0)], axis=1) * w).sum(), a0)
    check_op(lambda t: (concat([as_tensor(a0), t], axis=1) * w).sum(), b0)


def test_straight_through_value_and_grad():
    x0 = np.array([0.1, 0.5, 0.9, 0.4999])
    t = Tensor(x0, requires_grad=True)
    out = straight_through(t)
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 1.0, 0.0])
    (out * np.array([1.0, 2.0, 3.0, 4.0])).sum().backward()
    # identity backward regardless of the hard forward
    np.testing.assert_allclose(t.grad, [1.0, 2.0, 3.0, 4.0])


def test_graph_consumed_error():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = (t * 2.0).sum()
    out.backward()
    with pytest.raises(GraphConsumedError):
        out.backward()


def test_backward_needs_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_detach_stops_gradient():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = (t.detach() * t).sum()
    out.backward()
    np.testing.assert_allclose(t.grad, [1.0, 2.0])


def test_no_grad_paths_are_pruned():
    frozen = Tensor(np.ones(3), requires_grad=False)
    live = Tensor(np.ones(3), requires_grad=True)
    out = (frozen * 3.0 + live * 2.0).sum()
    out.backward()
    assert frozen.grad is None
    np.testing.assert_allclose(live.grad, [2.0, 2.0, 2.0])


def test_grad_accumulates_across_uses():
    t = Tensor(np.array([1.0, 3.0]), requires_grad=True)
    out = (t * 2.0).sum() + (t**2).sum()
    out.backward()
    np.testing.assert_allclose(t.grad, 2.0 + 2.0 * t.data)


def test_batch_sum_linearity():
    # the gradient of a sum over independent rows is the stack of row grads
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((4, 3))

    def row_loss(t):
        return ((t * t).sum(axis=1) * np.arange(1.0, 5.0)).sum()

    t = Tensor(x0.copy(), requires_grad=True)
    row_loss(t).backward()
    for b in range(4):
        single = Tensor(x0[b : b + 1].copy(), requires_grad=True)
        ((single * single).sum(axis=1) * np.array([b + 1.0])).sum().backward()
        np.testing.assert_allclose(t.grad[b], single.grad[0], rtol=1e-10, atol=1e-12)


def test_zero_weight_branch_kills_gradient():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = (t * 0.0).sum() + as_tensor(np.array(5.0)).reshape()
    out.backward()
    np.testing.assert_allclose(t.grad, [0.0, 0.0])
