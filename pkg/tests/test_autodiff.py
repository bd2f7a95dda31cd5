import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv3d import autodiff as ad
from mv3d.autodiff import Tensor, backward, grad_check, no_grad, parameter


def _rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


UNARY = {
    "sigmoid": (ad.sigmoid, (-3, 3)),
    "relu": (ad.relu, (-3, 3)),
    "softplus": (ad.softplus, (-3, 3)),
    "sin": (ad.sin, (-3, 3)),
    "cos": (ad.cos, (-3, 3)),
    "exp": (lambda x: x.exp(), (-2, 2)),
    "log": (lambda x: x.log(), (0.2, 3)),
    "abs": (lambda x: x.abs(), (-3, 3)),
    "pow3": (lambda x: x ** 3, (-2, 2)),
    "softmax": (lambda x: ad.softmax(x, axis=-1), (-2, 2)),
    "layer_norm": (ad.layer_norm, (-2, 2)),
    "clip": (lambda x: ad.clip(x, -0.5, 0.5), (-1, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    fn, (lo, hi) = UNARY[name]
    x = parameter(_rand((3, 4), seed=1, lo=lo, hi=hi))
    w = Tensor(_rand((3, 4), seed=2))
    if name in ("relu", "abs", "clip"):
        # keep probes away from the kinks
        d = x.data
        d[np.abs(d) < 0.05] += 0.1
        if name == "clip":
            d[np.abs(np.abs(d) - 0.5) < 0.05] += 0.1
    assert grad_check(lambda: (fn(x) * w).sum(), [x]) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_suffix_broadcast_gradients(op):
    a = parameter(_rand((2, 3, 4), seed=3, lo=0.5, hi=1.5))
    b = parameter(_rand((4,), seed=4, lo=0.5, hi=1.5))
    f = {"add": lambda: (a + b).sum(), "sub": lambda: ((a - b) ** 2).sum(),
         "mul": lambda: (a * b).sum(), "div": lambda: (a / b).sum()}[op]
    assert grad_check(f, [a, b]) < 1e-6


def test_matmul_batched_and_2d_rhs():
    a = parameter(_rand((2, 3, 4), seed=5))
    b = parameter(_rand((4, 5), seed=6))
    c = parameter(_rand((2, 5, 3), seed=7))
    assert grad_check(lambda: ((a @ b) @ c).sum(), [a, b, c]) < 1e-6
    np.testing.assert_allclose((a @ b).data, np.einsum("bij,jk->bik", a.data, b.data), atol=1e-12)


def test_shape_ops_gradients():
    x = parameter(_rand((2, 3, 4), seed=8))
    w = Tensor(_rand((4, 3, 2), seed=9))

    def f():
        y = x.transpose(2, 1, 0) * w
        z = ad.concat([y, y[..., :1]], axis=2)
        return z.reshape(-1).sum() + ad.take(x, [0, 0, 1], axis=0).mean() + x.mean(axis=1).sum()
    assert grad_check(f, [x]) < 1e-6


def test_reused_node_accumulates():
    x = parameter([2.0])
    y = x * x + x * 3.0
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_leaf_grad_accumulates_across_calls():
    x = parameter([1.0, 2.0])
    backward((x * 2.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [5.0, 5.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_errors():
    x = parameter(np.ones(3))
    with pytest.raises(ad.BackwardError):
        backward(x * 2.0)
    y = (x * 2.0).sum()
    backward(y)
    with pytest.raises(ad.BackwardError):
        backward(y)


def test_incompatible_shapes_raise():
    a = Tensor(np.ones((3, 4)))
    with pytest.raises(ad.ShapeError):
        a + Tensor(np.ones((3, 1)))
    with pytest.raises(ad.ShapeError):
        a @ Tensor(np.ones((3, 4)))


def test_unknown_primitive():
    with pytest.raises(ad.UnknownPrimitiveError):
        ad.apply_primitive("no_such_op", [Tensor(1.0)])


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert len(ad.current_tape()) == 0


def test_grad_check_restores_parameters():
    x = parameter(_rand((4,), seed=11))
    before = x.data.copy()
    grad_check(lambda: (x ** 2).sum(), [x])
    np.testing.assert_array_equal(x.data, before)


def test_grad_check_detects_wrong_gradient(monkeypatch):
    prim = ad.PRIMITIVES["sin"]
    broken = ad.Primitive(prim.n_inputs, prim.forward, lambda g, xs, out, saved, attrs: (g * 2.0 * np.cos(xs[0]),))
    monkeypatch.setitem(ad.PRIMITIVES, "sin", broken)
    x = parameter(_rand((3,), seed=12))
    assert grad_check(lambda: ad.sin(x).sum(), [x]) > 0.3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 16))
def test_softmax_rows_sum_to_one(shape, seed):
    x = Tensor(np.random.default_rng(seed).normal(0, 5, shape))
    s = ad.softmax(x, axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_mul_sum_gradient_is_other_operand(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = parameter(rng.normal(size=(n, m))), parameter(rng.normal(size=(m,)))
    backward((a * b).sum())
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (n, m)))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))
