import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pocketdex import autograd as ag
from pocketdex.autograd import Tensor


def numeric_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = fn(x)
        x[idx] = orig - eps
        down = fn(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def check(op, *shapes, seed=0, tol=1e-6, positive=False):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)
    (out * weights).sum().backward()
    for i, a in enumerate(arrays):

        def f(x, i=i):
            args = [Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
            return float((op(*args).data * weights).sum())

        expected = numeric_grad(f, a.copy())
        np.testing.assert_allclose(tensors[i].grad, expected, rtol=tol, atol=tol)


OPS = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)], {}),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)], {}),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)], {}),
    "div": (lambda a, b: a / b, [(3, 2), (3, 2)], {"positive": True}),
    "pow": (lambda a: a**3, [(4,)], {}),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], {}),
    "batched_matmul": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 2)], {}),
    "exp": (lambda a: a.exp(), [(3, 3)], {}),
    "log": (lambda a: a.log(), [(5,)], {"positive": True}),
    "sqrt": (lambda a: a.sqrt(), [(5,)], {"positive": True}),
    "tanh": (lambda a: a.tanh(), [(2, 5)], {}),
    "sum_axis": (lambda a: a.sum(axis=1, keepdims=True), [(3, 4)], {}),
    "mean": (lambda a: a.mean(axis=0), [(3, 4)], {}),
    "reshape_transpose": (lambda a: a.reshape(4, 6).transpose(1, 0), [(2, 3, 4)], {}),
    "swapaxes": (lambda a: a.swapaxes(0, 2), [(2, 3, 4)], {}),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 0])], [(3, 4)], {}),
    "softmax": (lambda a: ag.softmax(a, axis=-1), [(3, 5)], {}),
    "log_softmax": (lambda a: ag.log_softmax(a, axis=0), [(4, 3)], {}),
    "gelu": (lambda a: ag.gelu(a), [(6,)], {}),
    "softplus": (lambda a: ag.softplus(a), [(6,)], {}),
    "layer_norm": (lambda a, s, o: ag.layer_norm(a, s, o), [(3, 6), (6,), (6,)], {}),
    "concat": (lambda a, b: ag.concat([a, b], axis=1), [(2, 3), (2, 2)], {}),
    "stack": (lambda a, b: ag.stack([a, b], axis=0), [(2, 3), (2, 3)], {}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_difference(name):
    op, shapes, kw = OPS[name]
    check(op, *shapes, **kw)


def test_gradient_accumulates_over_reused_node():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_without_requires_grad():
    x = Tensor(np.ones(3))
    y = (x * 2).sum()
    y.backward()
    assert x.grad is None


def test_log_softmax_is_stable_for_huge_logits():
    x = Tensor(np.array([[1000.0, 0.0, -1000.0]]), requires_grad=True)
    out = ag.log_softmax(x, axis=1)
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] == pytest.approx(0.0)


def test_where_const_blocks_gradient_at_filled_positions():
    x = Tensor(np.arange(4.0), requires_grad=True)
    cond = np.array([True, False, True, False])
    ag.where_const(cond, x, -5.0).sum().backward()
    np.testing.assert_array_equal(x.grad, cond.astype(float))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(n, m, seed):
    check(lambda a, b: a @ b, (n, 3), (3, m), seed=seed)


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, seed):
    x = np.random.default_rng(seed).standard_normal((3, n)) * 10
    out = ag.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
