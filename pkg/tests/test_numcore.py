"""Tensor ops, gradient tapes and the finite-difference oracle"""
import math

import numpy as np
import pytest

from app.core import numcore as nc
from app.core.errors import NumericFault, ShapeError, TapeError
from app.core.numcore import GradTape, Graph, Parameter, Tensor, finite_diff_check, forward_eval


def test_square_value():
    x = Tensor(3.0)
    assert nc.mul(x, x).item() == 9.0


def test_sigmoid_at_zero():
    assert nc.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert nc.matmul(a, b).shape == (2, 4)


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_rejected():
    with pytest.raises(NumericFault):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericFault):
        nc.log(Tensor(0.0))


def test_gradient_of_square():
    x = Parameter(3.0, name="x")
    with GradTape() as tape:
        y = nc.mul(x, x)
    assert tape.backward(y)[x] == pytest.approx(6.0)


def test_gradient_of_sigmoid():
    x = Parameter(0.0, name="x")
    with GradTape() as tape:
        y = nc.sigmoid(x)
    assert tape.backward(y)[x] == pytest.approx(0.25)


def test_product_rule():
    x, y = Parameter(2.0, name="x"), Parameter(5.0, name="y")
    with GradTape() as tape:
        z = nc.mul(x, y)
    grads = tape.backward(z)
    assert grads[x] == pytest.approx(5.0)
    assert grads[y] == pytest.approx(2.0)


def test_tape_consumed_once():
    x = Parameter(1.0, name="x")
    with GradTape() as tape:
        y = nc.mul(x, 2.0)
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_vector_output_needs_seed():
    x = Parameter(np.ones(3), name="x")
    with GradTape() as tape:
        y = nc.mul(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_unwatched_tensors_get_no_gradient():
    x = Parameter(2.0, name="x")
    y = Parameter(3.0, name="y")
    with GradTape(auto_watch=False) as tape:
        tape.watch(x)
        z = nc.mul(x, y)
    grads = tape.backward(z)
    assert y not in grads
    assert grads[x] == pytest.approx(3.0)


def test_no_tape_builds_no_graph():
    before = GradTape.constructed
    nc.mul(Parameter(2.0, name="x"), 3.0)
    assert GradTape.constructed == before


def test_finite_diff_quadratic():
    assert finite_diff_check(lambda x: nc.sum_(nc.mul(x, x)), [1.0]) < 1e-6


def test_finite_diff_sigmoid():
    assert finite_diff_check(lambda x: nc.sum_(nc.sigmoid(x)), [0.7]) < 1e-5


def test_finite_diff_constant():
    assert finite_diff_check(lambda x: nc.sum_(nc.mul(x, 0.0)), [0.3, -1.2]) == 0.0


def test_finite_diff_layer_norm_and_softmax():
    rng = np.random.default_rng(1)
    gamma = Tensor(rng.normal(size=5))
    beta = Tensor(rng.normal(size=5))
    weights = Tensor(rng.normal(size=(2, 5)))

    def fn(x):
        h = nc.layer_norm(x, gamma, beta)
        return nc.sum_(nc.mul(nc.softmax(nc.gelu(h)), weights))

    assert finite_diff_check(fn, rng.normal(size=(2, 5))) < 1e-3


def test_bce_with_logits_gradient():
    targets = np.array([[1.0, 0.0, 0.0]])
    weights = np.full((1, 3), 1.0 / 3)
    assert finite_diff_check(lambda x: nc.bce_with_logits(x, targets, weights), [[0.2, -0.4, 1.1]]) < 1e-4


def test_parameter_assign_keeps_shape():
    p = Parameter(np.zeros((2, 2)), name="p")
    p.assign(np.ones((2, 2)))
    assert p.data.sum() == 4.0
    with pytest.raises(ShapeError):
        p.assign(np.ones(3))


def test_forward_eval_checks_signature():
    graph = Graph(fn=lambda a, b: nc.matmul(a, b), signature=[(None, 3), (3, 2)])
    (out,) = forward_eval(graph, [Tensor(np.ones((4, 3))), Tensor(np.ones((3, 2)))])
    assert out.shape == (4, 2)
    with pytest.raises(ShapeError):
        forward_eval(graph, [Tensor(np.ones((4, 2))), Tensor(np.ones((3, 2)))])


def test_gelu_at_zero_and_large():
    assert nc.gelu(Tensor(0.0)).item() == 0.0
    assert math.isclose(nc.gelu(Tensor(10.0)).item(), 10.0, rel_tol=1e-5)
