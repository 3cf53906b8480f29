import numpy as np
import pytest

from trajcompose.ndnet import (FrozenError, Graph, NonFiniteError, OptState, ParamSet, ShapeError, backward,
                               forward, opt_step)

from frozen import FD_RTOL
from oracles import central_difference, mlp_by_hand, relative_error


def _check_grads(g: Graph, loss: int, params: ParamSet, inputs: dict, input_names=()):
    """Analytic parameter/input gradients vs central differences; returns worst relative error."""
    g.forward(params, inputs)
    grads = backward(g, loss, wrt_inputs=True)
    an_inputs = {n: g.input_grad(n).copy() for n in input_names}

    def f():
        g.forward(params, inputs)
        return float(g.values[loss])

    worst = 0.0
    for name in params.names():
        num = central_difference(f, params.tensors[name])
        worst = max(worst, relative_error(grads[name], num))
    for name in input_names:
        num = central_difference(f, inputs[name])
        worst = max(worst, relative_error(an_inputs[name], num))
    return worst


def _random_target(g, node, rng, batch):
    shape = tuple(batch if s is None else s for s in g.shape(node))
    return rng.normal(size=shape)


OP_CASES = ["linear", "silu", "relu", "tanh", "concat", "mean", "max", "masked_mean", "masked_max",
            "sinusoidal", "mse"]


def _build(op, rng):
    """Small graph exercising ``op``; returns (graph, loss id, inputs, differentiable input names)."""
    b = int(rng.integers(1, 4))
    d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    g = Graph()
    inputs = {}
    names = []
    if op in ("linear", "silu", "relu", "tanh", "mse"):
        x = g.input("x", (None, d_in))
        inputs["x"] = rng.normal(size=(b, d_in))
        names = ["x"]
        y = g.linear(x, d_out, "l")
        if op in ("silu", "relu", "tanh"):
            y = g.act(y, op)
    elif op == "concat":
        x1 = g.input("a", (None, d_in))
        x2 = g.input("b", (None, 2))
        inputs.update(a=rng.normal(size=(b, d_in)), b=rng.normal(size=(b, 2)))
        names = ["a", "b"]
        y = g.linear(g.concat([x1, x2]), d_out, "l")
    elif op in ("mean", "max", "masked_mean", "masked_max"):
        n = int(rng.integers(2, 6))
        x = g.input("x", (None, n, d_in))
        inputs["x"] = rng.normal(size=(b, n, d_in))
        names = ["x"]
        h = g.linear(x, d_out, "l")
        mask = None
        if op.startswith("masked"):
            mask = g.input("m", (None, n))
            m = (rng.random((b, n)) < 0.7).astype(float)
            m[:, 0] = 1.0
            inputs["m"] = m
        y = g.reduce(h, op.split("_")[-1], axis=1, mask=mask)
    elif op == "sinusoidal":
        t = g.input("t", (None,))
        inputs["t"] = rng.uniform(0, 20, size=b)
        names = ["t"]
        y = g.linear(g.sinusoidal(t, 8), d_out, "l")
    else:
        raise AssertionError(op)
    target = g.input("target", g.shape(y))
    inputs["target"] = _random_target(g, y, rng, b)
    if op == "mse":
        names = names + ["target"]
    loss = g.mse(y, target)
    params = ParamSet(g.param_specs, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for k in params.names():  # nonzero biases so every path carries gradient
        params.tensors[k] += rng.normal(scale=0.1, size=params.tensors[k].shape)
    return g, loss, params, inputs, names


@pytest.mark.parametrize("op", OP_CASES)
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(OP_CASES.index(op))
    errs = [_check_grads(*_build(op, rng)) for _ in range(100)]
    assert max(errs) < FD_RTOL, f"{op}: worst relative error {max(errs):.2e}"


def test_identity_graph_returns_input():
    g = Graph()
    x = g.input("x", (None, 3))
    g.output("y", x)
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(forward(ParamSet({}), g, {"x": a})["y"], a.astype(np.float32))


def test_zero_weight_linear_gives_zero():
    g = Graph()
    g.output("y", g.linear(g.input("x", (None, 4)), 3, "l"))
    p = ParamSet(g.param_specs, seed=1)
    p.tensors["l.w"][:] = 0
    y = forward(p, g, {"x": np.random.default_rng(0).normal(size=(5, 4))})["y"]
    assert np.all(y == 0)


def test_two_layer_net_matches_hand_evaluation():
    g = Graph()
    x = g.input("x", (None, 3))
    g.output("y", g.linear(g.act(g.linear(x, 4, "l1"), "tanh"), 2, "l2"))
    p = ParamSet(g.param_specs, seed=7, dtype=np.float64)
    p.tensors["l1.b"][:] = [0.1, -0.2, 0.3, 0.0]
    p.tensors["l2.b"][:] = [0.5, -0.5]
    xv = np.random.default_rng(3).normal(size=(2, 3))
    got = forward(p, g, {"x": xv})["y"]
    want = mlp_by_hand(xv, p["l1.w"], p["l1.b"], p["l2.w"], p["l2.b"], np.tanh)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_linear_scalar_gradient():
    # y = x * w with x = 2; loss = y^2, so dloss/dw = 2y * x and dy/dw = x = 2
    g = Graph()
    y = g.linear(g.input("x", (1, 1)), 1, "l", bias=False)
    loss = g.mse(y, g.input("zero", (1, 1)))
    p = ParamSet.from_arrays({"l.w": [[0.5]]}, dtype=np.float64)
    g.forward(p, {"x": np.array([[2.0]]), "zero": np.zeros((1, 1))})
    grads = backward(g, loss)
    y_val = 1.0
    assert grads["l.w"][0, 0] / (2 * y_val) == pytest.approx(2.0)


def test_constant_loss_has_zero_gradient():
    g = Graph()
    x = g.input("x", (None, 2))
    g.linear(x, 3, "unused")
    t = g.input("t", (None, 2))
    loss = g.mse(x, t)
    p = ParamSet(g.param_specs, seed=0, dtype=np.float64)
    g.forward(p, {"x": np.ones((2, 2)), "t": np.zeros((2, 2))})
    grads = backward(g, loss)
    assert all(np.all(v == 0) for v in grads.values())


def test_shape_mismatch_names_the_node():
    g = Graph()
    g.output("y", g.linear(g.input("obs", (None, 3)), 2, "l"))
    with pytest.raises(ShapeError, match="obs"):
        g.forward(ParamSet(g.param_specs), {"obs": np.zeros((2, 4))})


def test_non_scalar_loss_rejected():
    g = Graph()
    y = g.linear(g.input("x", (None, 3)), 2, "l")
    g.forward(ParamSet(g.param_specs), {"x": np.zeros((1, 3))})
    with pytest.raises(ValueError, match="not scalar"):
        backward(g, y)


def _quadratic(dtype=np.float64, target=3.0):
    g = Graph()
    one = g.input("one", (1, 1))
    y = g.linear(one, 1, "w", bias=False)
    loss = g.mse(y, g.input("target", (1, 1)))
    p = ParamSet.from_arrays({"w.w": [[0.0]]}, dtype=dtype)
    inputs = {"one": np.ones((1, 1)), "target": np.full((1, 1), target)}
    return g, loss, p, inputs


def test_zero_gradient_leaves_params_unchanged():
    g, loss, p, inputs = _quadratic()
    before = p["w.w"].copy()
    st = OptState.for_params(p, lr=0.1)
    opt_step(p, {"w.w": np.zeros((1, 1))}, st)
    np.testing.assert_array_equal(p["w.w"], before)
    assert st.step == 1


def test_one_step_reduces_quadratic_loss():
    g, loss, p, inputs = _quadratic()
    st = OptState.for_params(p, lr=0.01)
    g.forward(p, inputs)
    l0 = float(g.values[loss])
    opt_step(p, backward(g, loss), st)
    g.forward(p, inputs)
    assert float(g.values[loss]) < l0


def test_quadratic_converges():
    g, loss, p, inputs = _quadratic()
    st = OptState.for_params(p, lr=0.05)
    for _ in range(5000):
        g.forward(p, inputs)
        if float(g.values[loss]) < 1e-6:
            break
        opt_step(p, backward(g, loss), st)
    g.forward(p, inputs)
    assert float(g.values[loss]) < 1e-6
    assert st.step < 5000


def test_nan_gradient_aborts():
    g, loss, p, inputs = _quadratic()
    st = OptState.for_params(p)
    with pytest.raises(NonFiniteError, match="w.w"):
        opt_step(p, {"w.w": np.array([[np.nan]])}, st)


def test_frozen_params_reject_updates():
    g, loss, p, inputs = _quadratic()
    st = OptState.for_params(p)
    p.freeze()
    with pytest.raises(FrozenError):
        opt_step(p, {"w.w": np.ones((1, 1))}, st)
    with pytest.raises(ValueError):
        p.tensors["w.w"][0, 0] = 1.0


def test_same_seed_same_params_and_outputs():
    def build():
        g = Graph()
        g.output("y", g.linear(g.act(g.linear(g.input("x", (None, 5)), 8, "a"), "silu"), 2, "b"))
        return g
    g1, g2 = build(), build()
    p1, p2 = ParamSet(g1.param_specs, seed=11), ParamSet(g2.param_specs, seed=11)
    for k in p1.names():
        np.testing.assert_array_equal(p1[k], p2[k])
    x = np.random.default_rng(0).normal(size=(4, 5))
    np.testing.assert_array_equal(forward(p1, g1, {"x": x})["y"], forward(p2, g2, {"x": x})["y"])


def test_output_shapes_known_before_execution():
    g = Graph()
    x = g.input("x", (None, 6, 3))
    h = g.reduce(g.linear(x, 4, "l"), "max")
    g.output("y", g.concat([h, g.sinusoidal(g.input("t", (None,)), 8)]))
    assert g.output_shapes() == {"y": (None, 12)}
    out = g.forward(ParamSet(g.param_specs), {"x": np.zeros((2, 6, 3)), "t": np.zeros(2)})
    assert out["y"].shape == (2, 12)


@pytest.mark.parametrize("kind", ["mean", "max"])
def test_set_reduction_is_permutation_invariant(kind):
    g = Graph()
    x = g.input("x", (None, 7, 3))
    m = g.input("m", (None, 7))
    g.output("y", g.reduce(g.act(g.linear(x, 5, "l"), "relu"), kind, mask=m))
    p = ParamSet(g.param_specs, seed=2)
    rng = np.random.default_rng(5)
    xv = rng.normal(size=(3, 7, 3)).astype(np.float32)
    mv = (rng.random((3, 7)) < 0.6).astype(np.float32)
    y0 = g.forward(p, {"x": xv, "m": mv})["y"].copy()
    perm = rng.permutation(7)
    y1 = g.forward(p, {"x": xv[:, perm], "m": mv[:, perm]})["y"]
    np.testing.assert_array_equal(y0, y1)
