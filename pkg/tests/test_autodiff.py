import numpy as np
import pytest

from atomgfn.autodiff import (Tensor, concat, grad_norm, layer_norm, no_grad, segment_logsumexp,
                              segment_log_softmax, segment_softmax, segment_sum)

IDS = np.array([0, 0, 1, 2, 2, 2])


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(fn, *shapes, seed=0, positive=False):
    """Compare analytic and central-difference gradients of sum(w * fn(...))."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (fn(*ts) * w).sum().backward()
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
            return float((fn(*args).data * w).sum())
        np.testing.assert_allclose(ts[k].grad, numeric_grad(f, a.copy()), rtol=1e-5, atol=1e-7)


def test_sum_of_squares_gradient():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (p * p).sum().backward()
    assert p.grad.tolist() == [2.0, -4.0, 6.0]


def test_elementwise_ops():
    check(lambda a, b: a + b, (3, 4), (4,))
    check(lambda a, b: a - b, (3, 4), (3, 1))
    check(lambda a, b: a * b, (3, 4), (1, 4))
    check(lambda a, b: a / b, (3, 4), (3, 4), positive=True)
    check(lambda a: 2.0 - a, (5,))
    check(lambda a: 1.0 / a, (5,), positive=True)
    check(lambda a: a ** 1.5, (5,), positive=True)
    check(lambda a: a.exp(), (5,))
    check(lambda a: a.log(), (5,), positive=True)
    check(lambda a: a.tanh(), (5,))
    check(lambda a: a.sigmoid(), (5,))
    check(lambda a: a.square(), (5,))
    check(lambda a: a.leaky_relu(0.1), (7,), seed=3)
    check(lambda a: a.relu(), (7,), seed=3)


def test_reductions_and_shapes():
    check(lambda a: a.sum(axis=0), (3, 4))
    check(lambda a: a.mean(axis=1, keepdims=True), (3, 4))
    check(lambda a: a.reshape(2, 6), (3, 4))
    check(lambda a: a.T, (3, 4))
    check(lambda a, b: a @ b, (3, 4), (4, 2))
    check(lambda a: a[np.array([0, 2, 2])], (3, 4))
    check(lambda a: a[np.array([0, 1, 1]), np.array([3, 0, 0])], (3, 4))
    check(lambda a, b: concat([a, b], axis=1), (3, 2), (3, 5))


def test_segment_ops():
    check(lambda a: segment_sum(a, IDS, 3), (6, 2))
    check(lambda a: segment_logsumexp(a, IDS, 3), (6,))
    check(lambda a: segment_log_softmax(a, IDS, 3), (6,))
    check(lambda a: segment_softmax(a, IDS, 3), (6, 2))


def test_segment_values():
    x = Tensor(np.array([0.0, np.log(3.0), 5.0, 1.0, 1.0, 1.0]))
    lse = segment_logsumexp(x, IDS, 3).data
    np.testing.assert_allclose(lse, [np.log(4.0), 5.0, 1.0 + np.log(3.0)])
    p = np.exp(segment_log_softmax(x, IDS, 3).data)
    np.testing.assert_allclose(np.bincount(IDS, weights=p), [1, 1, 1])


def test_masked_logits_get_zero_gradient():
    x = Tensor(np.array([-np.inf, 0.0, 1.0]), requires_grad=True)
    out = segment_logsumexp(x, np.array([0, 0, 0]), 1)
    assert out.data[0] == pytest.approx(np.log(1 + np.e))
    out.sum().backward()
    assert x.grad[0] == 0.0
    np.testing.assert_allclose(x.grad[1:], [1 / (1 + np.e), np.e / (1 + np.e)])


def test_layer_norm_gradient():
    check(lambda x, g, b: layer_norm(x, g, b), (4, 6), (6,), (6,))
    y = layer_norm(Tensor(np.arange(12.0).reshape(2, 6)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(y.data.mean(axis=1), 0, atol=1e-12)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    assert x.grad.tolist() == [2 * 2.0 + 3 * 4.0]  # d(x^2 + x^3)/dx


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert grad_norm([a, b]) == 5.0


def test_constant_leaves_get_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    (x * c).sum().backward()
    assert c.grad is None and x.grad.tolist() == [1, 1, 1]
