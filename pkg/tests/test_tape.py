import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikegrad.errors import PreconditionError, ShapeError, UnreachableError
from spikegrad.rng import CounterRNG
from spikegrad.tape import (TRUE_GRADIENT, Node, SpikeGradRule, Tape, backward, forward_record,
                           grad_check_differentiable, param_grads)
from spikegrad.analysis import PARAM_NAMES, TABLE1

finite = st.floats(-5, 5, allow_nan=False)


def perceptron(tape, x, rng=None, w=2.0, theta=1.0):
    u = tape.mul(tape.param(np.array([w]), "w"), tape.const([x]))
    return tape.heaviside_spike(u, theta)


def test_record_heaviside_stores_membrane_and_spike():
    tape = forward_record(perceptron, (1.0,))
    u = tape.nodes[tape.output].inputs[0]
    assert tape.values[u][0] == 2.0
    assert tape.values[tape.output][0] == 1.0


def test_record_bernoulli_at_threshold_stores_half():
    tape = Tape()
    u = tape.const([1.0])
    s = tape.bernoulli_spike(u, 1.0, 10.0, CounterRNG(0).uniform(1))
    assert tape.aux[s]["p"][0] == 0.5
    assert tape.values[s][0] in (0.0, 1.0)


def test_two_layer_chain_has_one_spike_node_per_layer():
    def program(tape, x, rng=None):
        h = tape.heaviside_spike(tape.matmul(tape.const(x), tape.param(np.ones((3, 2)), "W0"), True), 1.0, 0)
        return tape.heaviside_spike(tape.matmul(h, tape.param(np.ones((1, 3)), "W1"), True), 1.0, 1)

    tape = forward_record(program, (np.ones((1, 2)),))
    assert [tape.nodes[i].params["layer"] for i in tape.spike_nodes()] == [0, 1]


def test_shape_mismatch_names_both_nodes():
    tape = Tape()
    a = tape.const(np.ones(3), "a")
    b = tape.const(np.ones(4), "b")
    with pytest.raises(ShapeError, match=r"\[a\].*\[b\]"):
        tape.add(a, b)
    with pytest.raises(ShapeError):
        tape.matmul(tape.const(np.ones((2, 3))), tape.const(np.ones((2, 3))))


def test_topological_order_and_adjoint_shapes():
    tape = forward_record(perceptron, (1.0,))
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.inputs)
    backward(tape, np.ones(1), SpikeGradRule())
    assert [a.shape for a in tape.adjoints] == [v.shape for v in tape.values]


def test_seed_shape_checked():
    tape = forward_record(perceptron, (1.0,))
    with pytest.raises(ShapeError):
        backward(tape, np.ones(3))


def test_unknown_op_kind_is_unreachable():
    tape = forward_record(perceptron, (1.0,))
    tape.nodes.append(Node("mystery", (tape.output,)))
    tape.values.append(np.ones(1))
    with pytest.raises(UnreachableError):
        backward(tape, {len(tape.nodes) - 1: np.ones(1)})


def _spike_grad(rule, x=0.0):
    tape = Tape()
    u = tape.param(np.array([x]), "u")
    tape.output = tape.heaviside_spike(u, 0.0)
    backward(tape, np.ones(1), rule)
    return tape.grad("u")[0]


def test_rule_values_at_threshold():
    assert _spike_grad(SpikeGradRule("sigmoid-derivative", 4.0)) == 1.0
    assert _spike_grad(SpikeGradRule("sigmoid-derivative", 4.0, scale_by_inv_beta=True)) == 0.25
    assert _spike_grad(SpikeGradRule("superspike", 7.0)) == 1.0
    assert _spike_grad(SpikeGradRule("identity-ste")) == 1.0
    assert _spike_grad(TRUE_GRADIENT) == 0.0


@given(st.floats(-3, 3), st.floats(0.1, 50))
def test_rule_formulas(x, beta):
    s = 1 / (1 + np.exp(-beta * x))
    assert np.isclose(_spike_grad(SpikeGradRule("sigmoid-derivative", beta), x), beta * s * (1 - s), rtol=1e-12)
    assert np.isclose(_spike_grad(SpikeGradRule("superspike", beta), x), 1 / (beta * abs(x) + 1) ** 2, rtol=1e-12)
    assert _spike_grad(SpikeGradRule("identity-ste"), x) == 1.0


def test_rule_validation():
    with pytest.raises(PreconditionError):
        SpikeGradRule("sigmoid-derivative", 0.0)
    with pytest.raises(PreconditionError):
        SpikeGradRule("superspike", -1.0)
    with pytest.raises(PreconditionError):
        SpikeGradRule("erf")
    assert SpikeGradRule.from_dict(SpikeGradRule("superspike", 3.0).to_dict()) == SpikeGradRule("superspike", 3.0)


def test_same_rule_for_heaviside_and_bernoulli_nodes():
    rule = SpikeGradRule("sigmoid-derivative", 5.0)
    x = np.linspace(-1, 1, 9)
    grads = []
    for kind in ("heaviside", "bernoulli"):
        tape = Tape()
        u = tape.param(x, "u")
        tape.output = (tape.heaviside_spike(u, 0.3) if kind == "heaviside"
                       else tape.bernoulli_spike(u, 0.3, 5.0, CounterRNG(1).uniform(x.size)))
        backward(tape, np.ones(x.size), rule)
        grads.append(tape.grad("u"))
    np.testing.assert_array_equal(*grads)


def _ste_program(tape, x, rng=None):
    h = tape.bernoulli_spike(tape.matmul(tape.const(x), tape.param(np.full((3, 2), 0.4), "W"), True),
                             0.5, 2.0, CounterRNG(rng).uniform((1, 3)))
    return tape.sum(h)


def test_identity_ste_passes_gradient_straight_through():
    tape = forward_record(_ste_program, (np.array([[1.0, -2.0]]),), rng=3)
    backward(tape, 1.0, SpikeGradRule("identity-ste"))
    np.testing.assert_array_equal(tape.grad("W"), np.tile([1.0, -2.0], (3, 1)))


def test_zero_rule_zeroes_weight_gradients():
    tape = forward_record(_ste_program, (np.array([[1.0, -2.0]]),), rng=3)
    backward(tape, 1.0, TRUE_GRADIENT)
    assert not tape.grad("W").any()


def test_grad_check_linear_map():
    def program(tape, x, rng=None):
        return tape.matmul(tape.const(x), tape.param(np.array([[1.5, -0.5]]), "w"), True)

    assert grad_check_differentiable(forward_record(program, (np.array([[2.0, 3.0]]),))) < 1e-10


def test_grad_check_single_sigmoid():
    def program(tape, rng=None):
        return tape.sigmoid(tape.mul(tape.param(np.array([0.0]), "w"), tape.const([1.0])), 2.0)

    tape = forward_record(program)
    backward(tape, np.ones(1))
    assert tape.grad("w")[0] == 0.5
    assert grad_check_differentiable(tape) < 1e-8


def test_grad_check_example_net():
    def program(tape, rng=None):
        w, v1, v2, u1, u2 = (tape.param(np.array([p]), n) for p, n in zip(TABLE1.params, PARAM_NAMES))
        b = TABLE1.beta_f
        g = tape.sigmoid(tape.mul(w, tape.const(1.0)), b)
        h1 = tape.sigmoid(tape.mul(v1, g), b)
        h2 = tape.sigmoid(tape.mul(v2, g), b)
        return tape.sigmoid(tape.add(tape.mul(u1, h1), tape.mul(u2, h2)), b)

    assert grad_check_differentiable(forward_record(program), 1e-5) < 1e-5


def test_grad_check_rejects_spike_nodes():
    with pytest.raises(PreconditionError):
        grad_check_differentiable(forward_record(perceptron, (1.0,)))


def u_shape(x):
    return (x.shape[0], 2)


def param_grads_copy(tape, seed, rule):
    backward(tape, seed, rule)
    return {k: v.copy() for k, v in param_grads(tape).items()}


def _mixed_program(tape, x, rng=None):
    W = tape.param(np.array([[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]), "W")
    b = tape.param(np.array([0.1, -0.1]), "b")
    u = tape.add(tape.matmul(tape.const(x), W, True), b)
    s = tape.bernoulli_spike(u, 0.2, 3.0, CounterRNG(rng).uniform(u_shape(x)))
    h = tape.leak_combine(s, tape.sigmoid(u, 2.0), 0.7, 0.3)
    r = tape.reset_gate(h, s, layer=None)
    g = tape.gather(tape.scale(r, 1.5), [1, 0, 1], axis=-1)
    return tape.sum(g, axis=-1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_backward_is_linear_in_seed(a, b):
    x = np.linspace(-1, 1, 12).reshape(4, 3)
    rule = SpikeGradRule("superspike", 4.0, backprop_through_reset=True)
    tape = forward_record(_mixed_program, (x,), rng=5)
    ga = param_grads_copy(tape, a, rule)
    gb = param_grads_copy(tape, b, rule)
    gab = param_grads_copy(tape, a + b, rule)
    for k in gab:
        np.testing.assert_allclose(gab[k], ga[k] + gb[k], rtol=0, atol=1e-12 * (1 + np.abs(gab[k]).max()))


def test_determinism_bit_identical():
    x = np.linspace(-1, 1, 12).reshape(4, 3)
    rule = SpikeGradRule("sigmoid-derivative", 3.0)
    out = []
    for _ in range(2):
        tape = forward_record(_mixed_program, (x,), rng=11)
        backward(tape, np.ones(4), rule)
        out.append((tape.values, param_grads(tape)))
    for v1, v2 in zip(out[0][0], out[1][0]):
        np.testing.assert_array_equal(v1, v2)
    for k in out[0][1]:
        np.testing.assert_array_equal(out[0][1][k], out[1][1][k])


def test_duplicate_param_rejected():
    tape = Tape()
    tape.param(1.0, "w")
    with pytest.raises(PreconditionError):
        tape.param(2.0, "w")


def test_grad_before_backward_rejected():
    tape = forward_record(perceptron, (1.0,))
    with pytest.raises(PreconditionError):
        tape.grad("w")


def test_layer_rule_mapping():
    def program(tape, rng=None):
        a = tape.heaviside_spike(tape.param(np.array([0.0]), "a"), 0.0, layer=0)
        b = tape.heaviside_spike(tape.param(np.array([0.0]), "b"), 0.0, layer=1)
        return tape.add(a, b)

    tape = forward_record(program)
    backward(tape, np.ones(1), {0: SpikeGradRule("identity-ste"), None: TRUE_GRADIENT})
    assert tape.grad("a")[0] == 1.0 and tape.grad("b")[0] == 0.0
    with pytest.raises(PreconditionError):
        backward(tape, np.ones(1), {0: SpikeGradRule("identity-ste")})
