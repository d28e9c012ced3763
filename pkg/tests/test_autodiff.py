import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metainflect import autodiff as ad
from metainflect.autodiff import Graph, GraphError, backward, evaluate, finite_difference_check


def graph_loss_fn(build):
    """Wrap a graph builder into the (params) -> (loss, grads) shape the
    finite-difference harness expects."""

    def fn(params):
        g = Graph()
        loss = build(g)
        vals = evaluate(g, params)
        grads = backward(g, loss, vals)
        return float(vals[loss.nid]), grads

    return fn


class TestForward:
    def test_sigmoid_at_zero(self):
        g = Graph()
        y = ad.sigmoid(g.const(0.0))
        assert evaluate(g, {})[y.nid] == 0.5

    def test_identity_matmul(self):
        g = Graph()
        x = g.input("x", (2,))
        y = ad.matmul(g.const(np.eye(2)), x)
        vals = evaluate(g, {"x": np.array([3.5, -1.25])})
        np.testing.assert_array_equal(vals[y.nid], [3.5, -1.25])

    def test_softmax_uniform_on_constant_logits(self):
        g = Graph()
        y = ad.softmax(g.const([7.3, 7.3, 7.3]))
        np.testing.assert_allclose(evaluate(g, {})[y.nid], [1 / 3] * 3, atol=1e-15)

    def test_unbound_input_raises(self):
        g = Graph()
        x = g.input("x", (2,))
        y = ad.tanh(x)
        with pytest.raises(GraphError, match="unbound"):
            evaluate(g, {})

    def test_bound_shape_mismatch_names_offender(self):
        g = Graph()
        g.input("x", (2, 3))
        with pytest.raises(GraphError, match="'x'"):
            evaluate(g, {"x": np.zeros((3, 2))})

    def test_build_time_shape_check(self):
        g = Graph()
        a = g.const(np.zeros((2, 3)))
        b = g.const(np.zeros((2, 3)))
        with pytest.raises(GraphError, match="matmul"):
            ad.matmul(a, b)

    def test_evaluate_deterministic(self):
        g = Graph()
        w = g.param("w", (4, 4))
        y = ad.reduce_sum(ad.tanh(ad.matmul(w, w)))
        binding = {"w": np.random.default_rng(0).normal(size=(4, 4))}
        v1 = evaluate(g, binding)[y.nid]
        v2 = evaluate(g, binding)[y.nid]
        assert v1 == v2


class TestBackward:
    def test_square_derivative(self):
        g = Graph()
        x = g.param("x", ())
        loss = x * x
        vals = evaluate(g, {"x": 3.0})
        grads = backward(g, loss, vals)
        assert grads["x"] == pytest.approx(6.0)

    def test_unused_parameter_gets_zero_gradient(self):
        g = Graph()
        x = g.param("x", ())
        p = g.param("p", (3,))
        loss = x * x
        grads = backward(g, loss, evaluate(g, {"x": 2.0, "p": np.zeros(3)}))
        np.testing.assert_array_equal(grads["p"], np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.param("x", (3,))
        y = ad.tanh(x)
        with pytest.raises(GraphError, match="scalar"):
            backward(g, y, evaluate(g, {"x": np.zeros(3)}))

    def test_unevaluated_graph_rejected(self):
        g = Graph()
        x = g.param("x", ())
        loss = x * x
        with pytest.raises(GraphError, match="evaluate"):
            backward(g, loss, [])

    def test_backward_linearity(self):
        rng = np.random.default_rng(11)
        w0 = rng.normal(size=(3, 4))
        r1 = rng.normal(size=(3, 4))
        r2 = rng.normal(size=(3, 4))
        a, b = 1.7, -0.4

        def parts(params):
            g = Graph()
            w = g.param("w", (3, 4))
            l1 = ad.reduce_sum(ad.sigmoid(w) * g.const(r1))
            l2 = ad.reduce_sum(ad.tanh(w) * g.const(r2))
            vals = evaluate(g, params)
            return (
                backward(g, l1, vals)["w"],
                backward(g, l2, vals)["w"],
            )

        def combined(params):
            g = Graph()
            w = g.param("w", (3, 4))
            l1 = ad.reduce_sum(ad.sigmoid(w) * g.const(r1))
            l2 = ad.reduce_sum(ad.tanh(w) * g.const(r2))
            loss = g.const(a) * l1 + g.const(b) * l2
            return backward(g, loss, evaluate(g, params))["w"]

        g1, g2 = parts({"w": w0})
        np.testing.assert_allclose(combined({"w": w0}), a * g1 + b * g2, atol=1e-12)


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


# One randomized scalar-valued graph per op kind. Constant multipliers keep
# gradients dense and asymmetric.
OP_CASES = {
    "add": lambda g: ad.reduce_sum(
        (g.param("a", (3, 4)) + g.param("b", (4,))) * g.const(_rand((3, 4), 1))
    ),
    "sub": lambda g: ad.reduce_sum(
        (g.param("a", (3, 4)) - g.param("b", (3, 1))) * g.const(_rand((3, 4), 2))
    ),
    "mul": lambda g: ad.reduce_sum(
        (g.param("a", (2, 3)) * g.param("b", (3,))) * g.const(_rand((2, 3), 3))
    ),
    "neg": lambda g: ad.reduce_sum(-g.param("a", (5,)) * g.const(_rand((5,), 4))),
    "matmul_22": lambda g: ad.reduce_sum(
        ad.matmul(g.param("a", (3, 4)), g.param("b", (4, 2))) * g.const(_rand((3, 2), 5))
    ),
    "matmul_12": lambda g: ad.reduce_sum(
        ad.matmul(g.param("a", (4,)), g.param("b", (4, 2))) * g.const(_rand((2,), 6))
    ),
    "matmul_21": lambda g: ad.reduce_sum(
        ad.matmul(g.param("a", (3, 4)), g.param("b", (4,))) * g.const(_rand((3,), 7))
    ),
    "matvec": lambda g: ad.reduce_sum(
        ad.matvec(g.param("x", (2, 3, 5)), g.param("v", (5,))) * g.const(_rand((2, 3), 8))
    ),
    "sigmoid": lambda g: ad.reduce_sum(ad.sigmoid(g.param("x", (3, 3))) * g.const(_rand((3, 3), 9))),
    "tanh": lambda g: ad.reduce_sum(ad.tanh(g.param("x", (4,))) * g.const(_rand((4,), 10))),
    "exp": lambda g: ad.reduce_sum(ad.exp(g.param("x", (3,))) * g.const(_rand((3,), 11))),
    "log_of_sigmoid": lambda g: ad.reduce_sum(ad.log(ad.sigmoid(g.param("x", (4,))))),
    "clip_min": lambda g: ad.reduce_sum(
        ad.clip_min(g.param("x", (5,)), 0.0) * g.const(_rand((5,), 12))
    ),
    "softmax": lambda g: ad.reduce_sum(
        ad.softmax(g.param("x", (2, 5))) * g.const(_rand((2, 5), 13))
    ),
    "concat": lambda g: ad.reduce_sum(
        ad.concat([g.param("a", (2, 3)), g.param("b", (2, 2))], axis=1) * g.const(_rand((2, 5), 14))
    ),
    "stack": lambda g: ad.reduce_sum(
        ad.stack([g.param("a", (2, 3)), g.param("b", (2, 3))], axis=1) * g.const(_rand((2, 2, 3), 15))
    ),
    "slice": lambda g: ad.reduce_sum(
        ad.slice_axis(g.param("x", (3, 6)), 1, 4, axis=-1) * g.const(_rand((3, 3), 16))
    ),
    "reshape": lambda g: ad.reduce_sum(
        ad.reshape(g.param("x", (2, 6)), (3, 4)) * g.const(_rand((3, 4), 17))
    ),
    "sum_axis": lambda g: ad.reduce_sum(
        ad.reduce_sum(g.param("x", (3, 4)), axis=0) * g.const(_rand((4,), 18))
    ),
    "mean_axis": lambda g: ad.reduce_sum(
        ad.mean(g.param("x", (3, 4)), axis=1) * g.const(_rand((3,), 19))
    ),
    "mean_all": lambda g: ad.mean(g.param("x", (3, 4))),
    "rows": lambda g: ad.reduce_sum(
        ad.rows(g.param("emb", (5, 3)), [[0, 2, 2], [1, 4, 0]]) * g.const(_rand((2, 3, 3), 20))
    ),
    "pick": lambda g: ad.reduce_sum(
        ad.pick(g.param("x", (3, 5)), [1, 0, 4]) * g.const(_rand((3,), 21))
    ),
    "scatter_sum": lambda g: ad.reduce_sum(
        ad.scatter_sum(g.param("w", (2, 4)), [[0, 1, 1, 3], [2, 2, 0, 4]], 5)
        * g.const(_rand((2, 5), 22))
    ),
    "weighted_sum": lambda g: ad.reduce_sum(
        ad.weighted_sum(g.param("w", (2, 3)), g.param("h", (2, 3, 4))) * g.const(_rand((2, 4), 23))
    ),
}


@pytest.mark.parametrize("opname", sorted(OP_CASES))
def test_gradients_match_finite_differences(opname):
    build = OP_CASES[opname]
    probe = Graph()
    build(probe)
    rng = np.random.default_rng(hash(opname) % 2**32)
    params = {name: rng.uniform(-0.9, 0.9, size=probe.nodes[nid].shape)
              for name, nid in probe.params.items()}
    if opname == "clip_min":
        # keep values away from the kink, central differences are wrong there
        params = {k: np.where(np.abs(v) < 0.05, 0.3, v) for k, v in params.items()}
    err = finite_difference_check(graph_loss_fn(build), params, epsilon=1e-5)
    assert err < 1e-4, f"{opname}: max relative error {err}"


class TestFiniteDifferenceHarness:
    def test_quadratic_loss_is_exact(self):
        c = np.array([0.3, -1.2, 2.0])

        def build(g):
            d = g.param("theta", (3,)) - g.const(c)
            return g.const(0.5) * ad.reduce_sum(d * d)

        err = finite_difference_check(graph_loss_fn(build), {"theta": np.array([1.0, 0.5, -0.25])})
        assert err < 1e-8

    def test_constant_loss_stays_below_threshold(self):
        def build(g):
            g.param("theta", (2,))
            return g.const(4.25) * g.const(1.0)

        err = finite_difference_check(graph_loss_fn(build), {"theta": np.zeros(2)})
        assert err < 1e-8

    def test_nondeterministic_loss_rejected(self):
        state = {"n": 0}

        def fn(params):
            state["n"] += 1
            return float(state["n"]), {"theta": np.zeros(2)}

        with pytest.raises(GraphError, match="deterministic"):
            finite_difference_check(fn, {"theta": np.zeros(2)})

    def test_epsilon_out_of_range(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda p: (0.0, {}), {}, epsilon=0.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_normalized_and_positive(x):
    g = Graph()
    y = ad.softmax(g.const(x), axis=-1)
    out = evaluate(g, {})[y.nid]
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out > 0).all()
