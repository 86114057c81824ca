"""Finite-difference checks for every autodiff op plus graph-shape cases."""

import numpy as np
import pytest

from fmda import autodiff as ad


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def check_unary(op, x, numeric):
    t = ad.Tensor(x)
    loss = ad.tsum(op(t) * np.cos(np.arange(x.size)).reshape(x.shape))
    loss.backward()
    expected = fd_grad(
        lambda y: float(
            np.sum(numeric(y) * np.cos(np.arange(x.size)).reshape(x.shape))
        ),
        x,
    )
    np.testing.assert_allclose(t.grad, expected, rtol=1e-6, atol=1e-8)


rng = np.random.default_rng(0)


@pytest.mark.parametrize(
    "op,numeric",
    [
        (ad.tanh, np.tanh),
        (ad.exp, np.exp),
        (ad.softplus, lambda x: np.logaddexp(0.0, x)),
        (ad.square, lambda x: x * x),
    ],
)
def test_unary_ops(op, numeric):
    check_unary(op, rng.standard_normal((3, 4)), numeric)


def test_log1p_positive_domain():
    check_unary(ad.log1p, np.abs(rng.standard_normal((2, 5))) + 0.1, np.log1p)


def test_add_mul_div_broadcast():
    a = ad.Tensor(rng.standard_normal((3, 4)))
    b = ad.Tensor(rng.standard_normal((1, 4)))
    c = ad.Tensor(np.abs(rng.standard_normal((3, 1))) + 0.5)
    loss = ad.tsum(a * b + a / c - b)
    loss.backward()
    for t, f in [
        (a, lambda x: np.sum(x * b.data + x / c.data - b.data)),
        (b, lambda x: np.sum(a.data * x + a.data / c.data - x)),
        (c, lambda x: np.sum(a.data * b.data + a.data / x - b.data)),
    ]:
        np.testing.assert_allclose(t.grad, fd_grad(f, t.data), rtol=1e-6, atol=1e-9)


def test_matmul_grad():
    a = ad.Tensor(rng.standard_normal((4, 3)))
    b = ad.Tensor(rng.standard_normal((3, 5)))
    w = rng.standard_normal((4, 5))
    loss = ad.tsum(ad.matmul(a, b) * w)
    loss.backward()
    np.testing.assert_allclose(a.grad, w @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ w, rtol=1e-12)


def test_sum_mean_axes():
    x = ad.Tensor(rng.standard_normal((3, 4)))
    ad.tsum(x, axis=0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = ad.Tensor(rng.standard_normal((3, 4)))
    ad.tmean(y).backward()
    np.testing.assert_allclose(y.grad, np.full((3, 4), 1 / 12))


def test_reshape_concat_slice():
    a = ad.Tensor(rng.standard_normal(6))
    b = ad.Tensor(rng.standard_normal(4))
    joined = ad.concat([ad.reshape(a, (3, 2)), ad.reshape(b, (2, 2))], axis=0)
    w = rng.standard_normal((5, 2))
    ad.tsum(joined * w).backward()
    np.testing.assert_allclose(a.grad, w[:3].reshape(-1))
    np.testing.assert_allclose(b.grad, w[3:].reshape(-1))

    c = ad.Tensor(rng.standard_normal(8))
    ad.tsum(ad.tslice(c, 2, 5)).backward()
    expected = np.zeros(8)
    expected[2:5] = 1.0
    np.testing.assert_array_equal(c.grad, expected)


def test_gather_scatter_roundtrip_grads():
    x = ad.Tensor(rng.standard_normal((4, 2)))
    idx = np.array([0, 2, 2, 3, 1, 2])
    w = rng.standard_normal((6, 2))
    ad.tsum(ad.gather_rows(x, idx) * w).backward()
    expected = np.zeros((4, 2))
    np.add.at(expected, idx, w)
    np.testing.assert_allclose(x.grad, expected)

    y = ad.Tensor(rng.standard_normal((6, 2)))
    v = rng.standard_normal((4, 2))
    scattered = ad.scatter_rows(y, idx, 4)
    assert scattered.data.shape == (4, 2)
    ad.tsum(scattered * v).backward()
    np.testing.assert_allclose(y.grad, v[idx])


def test_diamond_graph_accumulates():
    # z = x*x + x*x must give dz/dx = 4x, exercising repeated-parent paths
    x = ad.Tensor(np.array([1.5, -2.0]))
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_shared_subgraph_reused_twice():
    x = ad.Tensor(np.array([0.3, 0.7]))
    h = ad.tanh(x)
    loss = ad.tsum(h * h) + ad.tsum(h)
    loss.backward()
    expected = fd_grad(
        lambda v: float(np.sum(np.tanh(v) ** 2) + np.sum(np.tanh(v))), x.data
    )
    np.testing.assert_allclose(x.grad, expected, rtol=1e-6)


def test_deep_chain_no_recursion_limit():
    x = ad.Tensor(np.ones(3) * 0.01)
    y = x
    for _ in range(3000):
        y = y + 1e-6
    ad.tsum(y).backward()
    np.testing.assert_allclose(x.grad, np.ones(3))


def test_scalar_coercion():
    x = ad.Tensor(np.array([2.0]))
    ((3.0 * x - 1.0) / 2.0).sum().backward()
    np.testing.assert_allclose(x.grad, [1.5])
