import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rri_seqnet.tensor import (ShapeError, Tape, Tensor, affine, backward, concat, grad_check, grad_check_params,
                               log_softmax, max_, no_grad, softmax, split)

rng = np.random.default_rng(0)


def _x(*shape):
    return rng.standard_normal(shape)


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "sigmoid": lambda t: t.sigmoid(),
    "silu": lambda t: t.silu(),
    "softplus": lambda t: t.softplus(),
    "relu": lambda t: (t + 0.05).relu(),
    "pow": lambda t: (t * t + 0.5) ** 1.5,
    "softmax": lambda t: t.softmax(-1),
    "log_softmax": lambda t: t.log_softmax(-1),
    "max": lambda t: t.max(axis=1),
    "mean": lambda t: t.mean(axis=0, keepdims=True),
    "transpose": lambda t: t.transpose(1, 0),
    "getitem": lambda t: t[1:, ::2],
    "div": lambda t: 1.0 / (t * t + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    f = UNARY[name]
    x = _x(3, 4)
    # a random readout makes every output coordinate matter
    w = Tensor(_x(*f(Tensor(x)).shape))
    assert grad_check(lambda t: (f(t) * w).sum(), x) < 1e-7


def test_binary_broadcast_gradients():
    b = Tensor(_x(1, 4), requires_grad=True)
    x = _x(3, 4)
    assert grad_check(lambda t: ((t + b) * (t - b) / (b * b + 1.0)).sum(), x) < 1e-7
    assert grad_check(lambda t: ((Tensor(x) + t) * (Tensor(x) - t)).sum(), b.data) < 1e-7


def test_matmul_affine_gradients():
    W, bias = _x(5, 4), _x(5)
    assert grad_check(lambda t: (t @ Tensor(W.T)).sigmoid().sum(), _x(3, 4)) < 1e-7
    x = _x(2, 3, 4)
    assert grad_check(lambda w: affine(Tensor(x), w, Tensor(bias)).silu().sum(), W) < 1e-7


def test_concat_split_roundtrip_gradient():
    def f(t):
        a, b = split(t, [2, 3], axis=-1)
        return (concat([b.exp(), a * 2.0], axis=-1) * Tensor(np.arange(5.0))).sum()
    assert grad_check(f, _x(2, 5)) < 1e-7


def test_gradient_accumulates_across_uses():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = (x * x + x * 3.0).sum()
    backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_backward_twice_accumulates_on_leaves():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_tape_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ((x.exp() + x) * x).sum()
    tape = Tape.from_output(y)
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert id(inp.node) in seen
        seen.add(id(node))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y.node is None and not y.requires_grad


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_relu_subgradient_at_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_max_routes_gradient_to_first_argmax():
    x = Tensor(np.array([[3.0, 1.0, 3.0]]), requires_grad=True)
    max_(x, axis=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_grad_check_params_detects_wrong_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad():
        return Tensor.from_op("bad", np.array(float((w.data ** 2).sum())), (w,), lambda g: (g * w.data,))
    assert grad_check_params(bad, [w]) > 0.1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_are_distributions(a):
    p = softmax(Tensor(a), axis=-1).data
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1.0)
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(a), axis=-1).data), p, rtol=1e-10, atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700, allow_nan=False)))
def test_sigmoid_softplus_stable_at_extremes(a):
    t = Tensor(a)
    assert np.all(np.isfinite(t.sigmoid().data)) and np.all(np.isfinite(t.softplus().data))
    assert np.all(t.softplus().data >= np.maximum(a, 0.0) - 1e-12)
