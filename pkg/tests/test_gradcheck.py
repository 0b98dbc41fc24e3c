import numpy as np
import pytest

from cecs.autodiff import OP_KINDS, Graph
from cecs.gradcheck import DegeneratePointError, grad_check, op_suite, op_trial, relative_error


def quadratic():
    g = Graph()
    x = g.placeholder("x")
    return g, g.dot(x, x)


def test_quadratic_passes():
    g, loss = quadratic()
    rep = grad_check(g, loss, {"x": np.array([0.3, -1.2, 2.0])}, step=1e-4, tolerance=1e-4)
    assert rep.passed
    assert rep.checked_entries["x"] == 3


def test_zero_tolerance_fails():
    g = Graph()
    x = g.placeholder("x")
    loss = g.sum(g.log_softmax(g.mul(x, x)))
    rep = grad_check(g, loss, {"x": np.array([[0.3, -1.2, 2.0]])}, tolerance=0.0)
    assert not rep.passed
    assert "x" in rep.failures


def test_relu_input_at_zero_is_degenerate():
    g = Graph()
    x = g.placeholder("x")
    loss = g.sum(g.relu(x))
    with pytest.raises(DegeneratePointError):
        grad_check(g, loss, {"x": np.array([1.0, 0.0])})


def test_kink_within_step_is_refined():
    # 1e-6 from the ReLU kink: the 1e-4 step crosses it, three refinements reach 1e-7
    g = Graph()
    x = g.placeholder("x")
    loss = g.sum(g.scale(g.relu(x), 3.0))
    rep = grad_check(g, loss, {"x": np.array([1e-6, 1.0])})
    assert rep.passed
    assert rep.refined_entries == 1


def test_kink_too_close_is_degenerate():
    g = Graph()
    x = g.placeholder("x")
    loss = g.sum(g.relu(x))
    with pytest.raises(DegeneratePointError):
        grad_check(g, loss, {"x": np.array([1e-12])})


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(0.0, 1e-10) == pytest.approx(1e-2)
    assert relative_error(2.0, 1.0) == 0.5


def test_wrong_gradient_is_caught(monkeypatch):
    """A deliberately broken backward kernel must be flagged."""
    import cecs.autodiff as ad

    fwd, bwd = ad._KERNELS["scale"]
    monkeypatch.setitem(ad._KERNELS, "scale", (fwd, lambda node, g, ins, out, cache: [g * 1.01 * node.attrs["factor"]]))
    g = Graph()
    x = g.placeholder("x")
    loss = g.sum(g.scale(x, 3.0))
    assert not grad_check(g, loss, {"x": np.ones(2)}).passed


@pytest.mark.parametrize("kind", OP_KINDS)
def test_op_trials_build_scalar_losses(kind):
    g, loss, inputs = op_trial(kind, np.random.default_rng(0))
    g.evaluate(inputs)
    assert np.shape(g.value(loss)) == ()


def test_every_op_passes_at_1e4():
    worst = op_suite(trials=100, seed=11)
    assert set(worst) == set(OP_KINDS)
    assert all(err < 1e-4 for err in worst.values()), worst
