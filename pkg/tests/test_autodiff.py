import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cecs.autodiff import (
    OP_KINDS,
    Graph,
    NonFiniteError,
    NonScalarLossError,
    ShapeMismatchError,
    UnboundInputError,
    backward,
    evaluate_graph,
)


def naive_conv(x, w, pad):
    """Direct 6-loop cross-correlation, NHWC x (kh, kw, cin, cout)."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += xp[b, i + di, j + dj, c] * w[di, dj, c, o]
                    out[b, i, j, o] = acc
    return out


def naive_pool(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for b in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for k in range(c):
                    out[b, i, j, k] = max(x[b, 2 * i + di, 2 * j + dj, k] for di in (0, 1) for dj in (0, 1))
    return out


def run(build, **inputs):
    g = Graph()
    nodes = {k: g.placeholder(k) for k in inputs}
    out = build(g, **nodes)
    g.mark_output("out", out)
    return g, out, g.evaluate(inputs)["out"]


def test_relu_example():
    _, _, y = run(lambda g, x: g.relu(x), x=np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 2.0])


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    _, _, y = run(lambda g, i, a: g.matmul(i, a), i=np.eye(3), a=a)
    np.testing.assert_array_equal(y, a)


def test_conv_valid_ones():
    x, w = np.ones((1, 2, 2, 1)), np.ones((2, 2, 1, 1))
    _, _, y = run(lambda g, x, w: g.conv2d(x, w, padding="valid"), x=x, w=w)
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 4.0


@given(st.integers(1, 2), st.integers(3, 6), st.integers(3, 6), st.integers(1, 3), st.integers(1, 3),
       st.sampled_from(["same", "valid"]), st.integers(0, 2**31))
def test_conv_matches_naive_loops(n, h, w, cin, cout, padding, seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(n, h, w, cin)), rng.normal(size=(3, 3, cin, cout))
    _, _, y = run(lambda g, x, k: g.conv2d(x, k, padding=padding), x=x, k=k)
    np.testing.assert_allclose(y, naive_conv(x, k, 1 if padding == "same" else 0), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_maxpool_matches_naive(hh, ww, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2 * hh, 2 * ww, 2))
    _, _, y = run(lambda g, x: g.maxpool2(x), x=x)
    np.testing.assert_array_equal(y, naive_pool(x))


def test_maxpool_tie_goes_to_first_index():
    x = np.ones((1, 2, 2, 1))
    g = Graph()
    xn = g.placeholder("x")
    loss = g.sum(g.maxpool2(xn))
    g.evaluate({"x": x})
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[xn][0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_log_softmax_is_stable():
    x = np.array([[1000.0, 0.0, -1000.0]])
    _, _, y = run(lambda g, x: g.log_softmax(x), x=x)
    np.testing.assert_allclose(y, [[0.0, -1000.0, -2000.0]])


def test_dot_gradients():
    g = Graph()
    x = g.placeholder("x")
    loss = g.dot(x, x)
    g.evaluate({"x": np.array([3.0])})
    np.testing.assert_array_equal(g.backward(loss)[x], [6.0])

    g = Graph()
    u, v = g.placeholder("u"), g.placeholder("v")
    loss = g.dot(u, v)
    vv = np.array([1.5, -2.0, 0.25])
    g.evaluate({"u": np.array([0.3, 0.1, 7.0]), "v": vv})
    np.testing.assert_array_equal(g.backward(loss)[u], vv)


def test_gather_picks_label_entries():
    x = np.arange(12.0).reshape(3, 4)
    _, _, y = run(lambda g, x, i: g.gather(x, i), x=x, i=np.array([2, 0, 3]))
    np.testing.assert_array_equal(y, [2.0, 4.0, 11.0])


def test_gather_rejects_out_of_range_label():
    g = Graph()
    out = g.gather(g.placeholder("x"), g.placeholder("i"))
    g.mark_output("o", out)
    with pytest.raises((IndexError, ValueError)):
        g.evaluate({"x": np.zeros((1, 3)), "i": np.array([3])})


def test_l2_norm_clamps_at_eps():
    _, _, y = run(lambda g, x: g.l2_norm(x, eps=1e-3), x=np.zeros((2, 4)))
    np.testing.assert_array_equal(y, [1e-3, 1e-3])


def test_unbound_placeholder():
    g = Graph()
    g.mark_output("o", g.relu(g.placeholder("x")))
    with pytest.raises(UnboundInputError):
        g.evaluate({})


def test_shape_mismatch_names_node():
    g = Graph()
    out = g.matmul(g.placeholder("a"), g.placeholder("b"))
    g.mark_output("o", out)
    with pytest.raises(ShapeMismatchError, match="matmul"):
        g.evaluate({"a": np.ones((2, 3)), "b": np.ones((4, 2))})


def test_non_finite_forward_raises():
    g = Graph()
    g.mark_output("o", g.scalar_div(g.placeholder("a"), g.placeholder("b")))
    with pytest.raises(NonFiniteError):
        g.evaluate({"a": np.ones(2), "b": np.zeros(2)})


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.placeholder("x")
    y = g.relu(x)
    g.evaluate({"x": np.ones(3)})
    with pytest.raises(NonScalarLossError):
        g.backward(y)


def test_unreached_nodes_get_zero_gradients():
    g = Graph()
    x, z = g.placeholder("x"), g.placeholder("z")
    side = g.relu(z)
    loss = g.sum(g.mul(x, x))
    g.evaluate({"x": np.array([1.0, 2.0]), "z": np.ones((2, 2))})
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[z], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads[side], np.zeros((2, 2)))
    assert grads[loss] == 1.0


def test_gradient_shapes_match_values(rng):
    g = Graph()
    x, w = g.placeholder("x"), g.placeholder("w")
    loss = g.sum(g.global_avg_pool(g.relu(g.conv2d(x, w))))
    g.evaluate({"x": rng.normal(size=(2, 4, 4, 3)), "w": rng.normal(size=(3, 3, 3, 2))})
    grads = g.backward(loss)
    for node in g.nodes:
        assert grads[node.id].shape == np.shape(g.value(node.id))


def test_evaluate_is_pure(rng):
    inputs = {"x": rng.normal(size=(1, 4, 4, 2)), "w": rng.normal(size=(3, 3, 2, 2))}
    g = Graph()
    g.mark_output("o", g.maxpool2(g.relu(g.conv2d(g.placeholder("x"), g.placeholder("w")))))
    a = g.evaluate(inputs)["o"].copy()
    b = g.evaluate(inputs)["o"]
    assert np.array_equal(a, b)


def test_module_level_wrappers(rng):
    g = Graph()
    x = g.placeholder("x")
    loss = g.mark_output("loss", g.sum(g.scale(x, 2.0)))
    out = evaluate_graph(g, {"x": np.ones(3)})
    assert out["loss"] == 6.0
    np.testing.assert_array_equal(backward(g, loss)[x], [2.0, 2.0, 2.0])


def test_gradient_of_sum_is_sum_of_gradients(rng):
    """Linearity: two independent subgraphs added together keep their separate gradients."""
    a0, b0 = rng.normal(size=(3,)), rng.normal(size=(2, 2))

    def single(build, name, value):
        g = Graph()
        x = g.placeholder(name)
        loss = build(g, x)
        g.evaluate({name: value})
        return g.backward(loss)[x]

    fa = lambda g, x: g.dot(x, g.relu(x))  # noqa: E731
    fb = lambda g, x: g.sum(g.log_softmax(g.mul(x, x)))  # noqa: E731
    g = Graph()
    a, b = g.placeholder("a"), g.placeholder("b")
    loss = g.add(fa(g, a), fb(g, b))
    g.evaluate({"a": a0, "b": b0})
    grads = g.backward(loss)
    np.testing.assert_allclose(grads[a], single(fa, "a", a0), rtol=1e-14)
    np.testing.assert_allclose(grads[b], single(fb, "b", b0), rtol=1e-14)


def test_catalog_is_complete():
    assert len(OP_KINDS) == 15
    for kind in OP_KINDS:
        assert hasattr(Graph, kind)
